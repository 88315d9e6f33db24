"""Cross-node atomic transactions for a hash-slot partitioned key-value store."""

__version__ = "0.1.0"
