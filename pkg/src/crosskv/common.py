"""Identifiers and small enums shared by the storage, replication and commit layers."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass


class ConfigInvalid(ValueError):
    """A topology, mode or cluster configuration that cannot be run."""


class Outcome(enum.Enum):
    COMMIT = "commit"
    ABORT = "abort"


class VoteDecision(enum.Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"


class EngineMode(enum.Enum):
    HIGHLY_AVAILABLE = "ha"
    DURABLE = "durable"


class ReplicationMode(enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


def client_tag(client: str) -> int:
    return int.from_bytes(hashlib.blake2b(client.encode(), digest_size=8).digest(), "big")


@dataclass(frozen=True, order=True, slots=True)
class TxnId:
    """128-bit transaction id: 64-bit client tag + 64-bit client-local counter."""

    origin: int
    counter: int

    @classmethod
    def new(cls, client: str, counter: int) -> "TxnId":
        return cls(client_tag(client), counter)

    def to_bytes(self) -> bytes:
        return self.origin.to_bytes(8, "big") + self.counter.to_bytes(8, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TxnId":
        if len(raw) != 16:
            raise ValueError(f"txn id must be 16 bytes, got {len(raw)}")
        return cls(int.from_bytes(raw[:8], "big"), int.from_bytes(raw[8:], "big"))

    def __str__(self) -> str:
        return f"{self.origin:016x}.{self.counter}"


def show_bytes(value: bytes | None) -> str:
    """Stable, printable rendering used in traces and error messages."""
    if value is None:
        return "-"
    out = []
    for b in value:
        if 0x21 <= b <= 0x7E and b not in (0x5C, 0x2C, 0x3D, 0x5B, 0x5D):
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out) if out else '""'
