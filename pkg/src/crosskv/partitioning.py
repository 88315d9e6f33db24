"""Hash-slot partitioning compatible with Redis Cluster.

Keys hash to one of ``slot_count`` slots (CRC16/XModem of the key, or of its
``{hash tag}`` when present) and each slot is owned by exactly one node group.
"""

from __future__ import annotations

import binascii
from dataclasses import dataclass, field
from typing import Iterable

DEFAULT_SLOT_COUNT = 16384


class EmptyTopology(ValueError):
    pass


class InvalidGroup(ValueError):
    pass


def hash_tag(key: bytes) -> bytes:
    """Return the bytes that determine the slot of ``key``.

    Only the first ``{`` counts; if the next ``}`` follows it immediately
    (``{}``) or is missing, the whole key is hashed.
    """
    start = key.find(b"{")
    if start == -1:
        return key
    end = key.find(b"}", start + 1)
    if end == -1 or end == start + 1:
        return key
    return key[start + 1 : end]


def crc16(data: bytes) -> int:
    # binascii.crc_hqx is CRC-CCITT with poly 0x1021; init 0 gives XModem.
    return binascii.crc_hqx(data, 0)


def key_to_slot(key: bytes, slot_count: int = DEFAULT_SLOT_COUNT) -> int:
    return crc16(hash_tag(key)) % slot_count


@dataclass(frozen=True)
class NodeGroup:
    """A master and its ordered replicas."""

    master: str
    replicas: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.replicas, tuple):
            object.__setattr__(self, "replicas", tuple(self.replicas))
        if self.master in self.replicas:
            raise InvalidGroup(f"master {self.master!r} listed as its own replica")
        if len(set(self.replicas)) != len(self.replicas):
            raise InvalidGroup(f"duplicate replicas in group of {self.master!r}")

    @property
    def members(self) -> tuple[str, ...]:
        return (self.master,) + self.replicas


@dataclass(frozen=True)
class SlotMap:
    slot_count: int
    groups: tuple[NodeGroup, ...]
    # bounds[i] is the first slot of group i; bounds[-1] == slot_count
    bounds: tuple[int, ...] = field(repr=False)

    def owner(self, slot: int) -> int:
        if not 0 <= slot < self.slot_count:
            raise ValueError(f"slot {slot} out of range [0, {self.slot_count})")
        # ranges are contiguous and sorted; groups are few, so a linear scan is fine
        for i in range(len(self.groups)):
            if slot < self.bounds[i + 1]:
                return i
        raise AssertionError("unreachable: bounds cover all slots")

    def group_of_key(self, key: bytes) -> int:
        return self.owner(key_to_slot(key, self.slot_count))

    def slot_range(self, group: int) -> tuple[int, int]:
        """Inclusive ``(first, last)`` slot range of ``group``."""
        return self.bounds[group], self.bounds[group + 1] - 1

    def ranges(self) -> list[tuple[int, int]]:
        return [self.slot_range(i) for i in range(len(self.groups))]

    def group_index_of(self, node: str) -> int:
        for i, g in enumerate(self.groups):
            if node in g.members:
                return i
        raise KeyError(node)


def assign_slots(groups: Iterable[NodeGroup], slot_count: int = DEFAULT_SLOT_COUNT) -> SlotMap:
    """Give group ``i`` of ``m`` the slots ``[i*n//m, (i+1)*n//m)``."""
    groups = tuple(groups)
    if not groups:
        raise EmptyTopology("at least one node group is required")
    if slot_count < len(groups):
        raise ValueError(f"slot_count {slot_count} smaller than group count {len(groups)}")
    seen: set[str] = set()
    for g in groups:
        for member in g.members:
            if member in seen:
                raise InvalidGroup(f"node {member!r} appears in more than one group")
            seen.add(member)
    m = len(groups)
    bounds = tuple((i * slot_count) // m for i in range(m + 1))
    return SlotMap(slot_count=slot_count, groups=groups, bounds=bounds)


def participants_for(keys: Iterable[bytes], slot_map: SlotMap) -> set[int]:
    return {slot_map.group_of_key(k) for k in keys}


def six_node_topology() -> list[NodeGroup]:
    """Three masters, each with one replica: the minimal six-node cluster."""
    return [NodeGroup(f"m{i}", (f"s{i}",)) for i in (1, 2, 3)]
