"""Commit-protocol data types, the decision rule and the internal message envelope.

Every node-to-node and client-to-node interaction is a :class:`Message`. On
the wire a message is framed like a WAL record::

    u32 length | u8 kind | u8 has_txn | 16 txn id | str src | str dst | body | u32 crc32

where ``str`` is ``u16 length + utf-8`` and ``body`` is a tagged value (see
:func:`pack_value`).
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping

from .common import Outcome, TxnId, VoteDecision


class IncompleteVotes(Exception):
    pass


class TxnState(enum.Enum):
    ACTIVE = "active"
    VOTING = "voting"
    COMMITTED = "committed"
    ABORTED = "aborted"


_NEXT_STATES = {
    TxnState.ACTIVE: {TxnState.VOTING},
    TxnState.VOTING: {TxnState.COMMITTED, TxnState.ABORTED},
    TxnState.COMMITTED: set(),
    TxnState.ABORTED: set(),
}


@dataclass
class TxnRecord:
    id: TxnId
    participants: frozenset[int]
    write_sets: dict[int, list[tuple[bytes, bytes]]]
    state: TxnState = TxnState.ACTIVE
    votes: dict[int, VoteDecision] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.write_sets) != set(self.participants):
            raise ValueError("write_sets must have exactly one entry per participant")
        for g in self.participants:
            self.votes.setdefault(g, VoteDecision.UNKNOWN)

    def advance(self, new: TxnState) -> None:
        if new not in _NEXT_STATES[self.state]:
            raise ValueError(f"illegal transition {self.state.value} -> {new.value}")
        if new is TxnState.COMMITTED and any(v is not VoteDecision.YES for v in self.votes.values()):
            raise ValueError("cannot commit without a YES from every participant")
        self.state = new


@dataclass(frozen=True)
class Vote:
    txn_id: TxnId
    group: int
    decision: VoteDecision
    participants_echo: frozenset[int]


def decide(votes: Mapping[int, VoteDecision]) -> Outcome:
    """COMMIT iff every participant voted YES.

    A single NO settles the outcome even while other votes are outstanding,
    because a cast vote never changes.
    """
    values = list(votes.values())
    if any(v is VoteDecision.NO for v in values):
        return Outcome.ABORT
    if any(v is VoteDecision.UNKNOWN for v in values):
        raise IncompleteVotes([g for g, v in votes.items() if v is VoteDecision.UNKNOWN])
    return Outcome.COMMIT


class Kind(enum.IntEnum):
    PREWRITE = 1
    VOTE = 2
    DECISION = 3
    TERM_QUERY = 4
    TERM_REPLY = 5
    ACK = 6
    READ = 7
    READ_REPLY = 8
    REPL = 9
    REPL_ACK = 10
    RESYNC_REQ = 11
    SNAPSHOT = 12
    SNAPSHOT_ACK = 13


# messages on the master->replica stream: never dropped by the simulator,
# the live transport keeps them on dedicated FIFO connections
REPLICATION_KINDS = frozenset({Kind.REPL, Kind.REPL_ACK, Kind.RESYNC_REQ, Kind.SNAPSHOT, Kind.SNAPSHOT_ACK})


@dataclass(slots=True)
class Message:
    kind: Kind
    src: str
    dst: str
    txn: TxnId | None = None
    body: dict = field(default_factory=dict)

    def encode(self) -> bytes:
        out = bytearray(struct.pack(">BB", int(self.kind), self.txn is not None))
        out += self.txn.to_bytes() if self.txn is not None else bytes(16)
        _pack_str(out, self.src)
        _pack_str(out, self.dst)
        pack_value(out, self.body)
        framed = struct.pack(">I", len(out) + 4) + bytes(out)
        return framed + struct.pack(">I", zlib.crc32(framed))

    @classmethod
    def decode(cls, frame: bytes) -> "Message":
        if len(frame) < 4 + 18 + 4:
            raise ProtocolError("short frame")
        (length,) = struct.unpack_from(">I", frame, 0)
        if length + 4 != len(frame):
            raise ProtocolError("length mismatch")
        if zlib.crc32(frame[:-4]) != struct.unpack_from(">I", frame, len(frame) - 4)[0]:
            raise ProtocolError("checksum mismatch")
        kind, has_txn = struct.unpack_from(">BB", frame, 4)
        txn = TxnId.from_bytes(frame[6:22]) if has_txn else None
        pos = 22
        src, pos = _unpack_str(frame, pos)
        dst, pos = _unpack_str(frame, pos)
        body, pos = unpack_value(frame, pos)
        if pos != len(frame) - 4:
            raise ProtocolError("trailing bytes in frame")
        return cls(Kind(kind), src, dst, txn, body)


class ProtocolError(Exception):
    pass


def _pack_str(out: bytearray, s: str) -> None:
    raw = s.encode()
    out += struct.pack(">H", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from(">H", buf, pos)
    return bytes(buf[pos + 2 : pos + 2 + n]).decode(), pos + 2 + n


# tagged values: N none, T/F bool, i int64, b bytes, s str, l list, d dict, x txn id,
# o outcome, v vote, r replication entry
def pack_value(out: bytearray, v: Any) -> None:
    if v is None:
        out += b"N"
    elif v is True:
        out += b"T"
    elif v is False:
        out += b"F"
    elif isinstance(v, int):
        out += b"i" + struct.pack(">q", v)
    elif isinstance(v, (bytes, bytearray)):
        out += b"b" + struct.pack(">I", len(v)) + bytes(v)
    elif isinstance(v, str):
        raw = v.encode()
        out += b"s" + struct.pack(">I", len(raw)) + raw
    elif isinstance(v, (list, tuple, frozenset, set)):
        items = sorted(v) if isinstance(v, (set, frozenset)) else v
        out += b"l" + struct.pack(">I", len(items))
        for item in items:
            pack_value(out, item)
    elif isinstance(v, dict):
        out += b"d" + struct.pack(">I", len(v))
        for k, item in v.items():
            pack_value(out, k)
            pack_value(out, item)
    elif isinstance(v, TxnId):
        out += b"x" + v.to_bytes()
    elif isinstance(v, Outcome):
        out += b"o" + (b"c" if v is Outcome.COMMIT else b"a")
    elif isinstance(v, VoteDecision):
        out += b"v" + {VoteDecision.YES: b"y", VoteDecision.NO: b"n", VoteDecision.UNKNOWN: b"u"}[v]
    elif hasattr(v, "to_wire"):
        out += b"r"
        pack_value(out, v.to_wire())
    else:
        raise TypeError(f"cannot encode {type(v).__name__}")


_VOTES = {b"y": VoteDecision.YES, b"n": VoteDecision.NO, b"u": VoteDecision.UNKNOWN}


def unpack_value(buf: bytes, pos: int) -> tuple[Any, int]:
    try:
        tag = buf[pos : pos + 1]
        pos += 1
        if tag == b"N":
            return None, pos
        if tag == b"T":
            return True, pos
        if tag == b"F":
            return False, pos
        if tag == b"i":
            return struct.unpack_from(">q", buf, pos)[0], pos + 8
        if tag in (b"b", b"s"):
            (n,) = struct.unpack_from(">I", buf, pos)
            raw = bytes(buf[pos + 4 : pos + 4 + n])
            if len(raw) != n:
                raise ProtocolError("truncated value")
            return (raw if tag == b"b" else raw.decode()), pos + 4 + n
        if tag == b"l":
            (n,) = struct.unpack_from(">I", buf, pos)
            pos += 4
            items = []
            for _ in range(n):
                item, pos = unpack_value(buf, pos)
                items.append(item)
            return items, pos
        if tag == b"d":
            (n,) = struct.unpack_from(">I", buf, pos)
            pos += 4
            d = {}
            for _ in range(n):
                k, pos = unpack_value(buf, pos)
                if isinstance(k, list):
                    k = tuple(k)
                d[k], pos = unpack_value(buf, pos)
            return d, pos
        if tag == b"x":
            return TxnId.from_bytes(bytes(buf[pos : pos + 16])), pos + 16
        if tag == b"o":
            return (Outcome.COMMIT if buf[pos : pos + 1] == b"c" else Outcome.ABORT), pos + 1
        if tag == b"v":
            return _VOTES[bytes(buf[pos : pos + 1])], pos + 1
        if tag == b"r":
            from .replication import ReplicationEntry

            wire, pos = unpack_value(buf, pos)
            return ReplicationEntry.from_wire(wire), pos
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed value at offset {pos}") from exc
    raise ProtocolError(f"unknown value tag {tag!r}")
