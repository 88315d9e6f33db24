"""Write-ahead log for the durable storage engine.

On-disk record layout (all integers big-endian)::

    u32 length            bytes that follow this field, CRC included
    u64 sequence
    u8  kind              0=INTENT 1=COMMIT 2=ABORT
    16  txn id
    (u32 klen, key, u32 vlen, value)*   INTENT only
    u32 crc32             over every preceding byte of the record

The first pair of an INTENT payload is always ``(PARTICIPANTS_KEY, packed
group indices)`` so an in-doubt transaction can be terminated after restart.
"""

from __future__ import annotations

import enum
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable

from .common import Outcome, TxnId

PARTICIPANTS_KEY = b"\x00participants"

_HEAD = struct.Struct(">IQB16s")
_U32 = struct.Struct(">I")


class WalKind(enum.IntEnum):
    INTENT = 0
    COMMIT = 1
    ABORT = 2


class CorruptLog(Exception):
    """A record before the tail failed its checksum or framing."""


class WalIoError(OSError):
    """The log device failed; the owning node must be treated as crashed."""


@dataclass(frozen=True)
class WalRecord:
    sequence: int
    kind: WalKind
    txn_id: TxnId
    payload: tuple[tuple[bytes, bytes], ...] = ()

    @classmethod
    def intent(cls, seq: int, txn_id: TxnId, writes: Iterable[tuple[bytes, bytes]],
               participants: Iterable[int]) -> "WalRecord":
        packed = b"".join(struct.pack(">H", g) for g in sorted(participants))
        return cls(seq, WalKind.INTENT, txn_id, ((PARTICIPANTS_KEY, packed),) + tuple(writes))

    @property
    def participants(self) -> frozenset[int]:
        if self.kind is not WalKind.INTENT or not self.payload:
            return frozenset()
        raw = self.payload[0][1]
        return frozenset(struct.unpack(f">{len(raw) // 2}H", raw))

    @property
    def writes(self) -> tuple[tuple[bytes, bytes], ...]:
        return self.payload[1:] if self.kind is WalKind.INTENT else ()

    def encode(self) -> bytes:
        body = bytearray()
        for key, value in self.payload:
            body += _U32.pack(len(key)) + key + _U32.pack(len(value)) + value
        length = _HEAD.size - 4 + len(body) + 4
        head = _HEAD.pack(length, self.sequence, int(self.kind), self.txn_id.to_bytes())
        data = head + bytes(body)
        return data + _U32.pack(zlib.crc32(data))


def decode_records(data: bytes) -> list[WalRecord]:
    """Parse a log image, dropping an incomplete or checksum-failing tail record."""
    records: list[WalRecord] = []
    pos = 0
    n = len(data)
    while pos < n:
        if n - pos < 4:
            break  # torn length prefix
        (length,) = _U32.unpack_from(data, pos)
        end = pos + 4 + length
        if end > n:
            break  # torn record
        crc_ok = zlib.crc32(data[pos:end - 4]) == _U32.unpack_from(data, end - 4)[0]
        if not crc_ok or length < _HEAD.size - 4 + 4:
            if end == n:
                break
            raise CorruptLog(f"bad record at byte offset {pos}")
        _, seq, kind, raw_txn = _HEAD.unpack_from(data, pos)
        pairs = []
        p = pos + _HEAD.size
        try:
            while p < end - 4:
                (klen,) = _U32.unpack_from(data, p)
                key = data[p + 4 : p + 4 + klen]
                p += 4 + klen
                (vlen,) = _U32.unpack_from(data, p)
                value = data[p + 4 : p + 4 + vlen]
                p += 4 + vlen
                pairs.append((bytes(key), bytes(value)))
            kind = WalKind(kind)
        except (struct.error, ValueError) as exc:
            raise CorruptLog(f"malformed payload at byte offset {pos}") from exc
        if p != end - 4:
            raise CorruptLog(f"payload overruns record at byte offset {pos}")
        if records and seq <= records[-1].sequence:
            raise CorruptLog(f"sequence {seq} not increasing at byte offset {pos}")
        records.append(WalRecord(seq, kind, TxnId.from_bytes(raw_txn), tuple(pairs)))
        pos = end
    return records


class MemoryDevice:
    """In-memory log device for simulation; survives simulated crashes.

    ``fail_after`` makes the N-th append (1-based) raise ``WalIoError``; with
    ``torn=True`` half of that record's bytes reach the device first.
    """

    def __init__(self, fail_after: int | None = None, torn: bool = False):
        self.data = bytearray()
        self.appends = 0
        self.fail_after = fail_after
        self.torn = torn

    def append(self, raw: bytes) -> None:
        self.appends += 1
        if self.fail_after is not None and self.appends == self.fail_after:
            if self.torn:
                self.data += raw[: len(raw) // 2]
            raise WalIoError(f"injected log failure on append {self.appends}")
        self.data += raw

    def read_all(self) -> bytes:
        return bytes(self.data)

    def truncate(self, size: int) -> None:
        del self.data[size:]

    def close(self) -> None:
        pass


class FileDevice:
    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self._fh: BinaryIO = open(self.path, "ab")

    def append(self, raw: bytes) -> None:
        try:
            self._fh.write(raw)
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise WalIoError(str(exc)) from exc

    def read_all(self) -> bytes:
        with open(self.path, "rb") as fh:
            return fh.read()

    def truncate(self, size: int) -> None:
        self._fh.flush()
        os.truncate(self.path, size)
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


@dataclass
class WriteAheadLog:
    device: MemoryDevice | FileDevice
    next_sequence: int = 1
    # called with each record once it is on the device (used for tracing)
    observer: Callable[[WalRecord], None] | None = None

    @classmethod
    def open(cls, device) -> "WriteAheadLog":
        """Attach to an existing log, cutting off a torn tail so appends follow the last good record."""
        data = device.read_all()
        records = decode_records(data)
        valid = sum(len(r.encode()) for r in records)
        if valid < len(data):
            device.truncate(valid)
        return cls(device, records[-1].sequence + 1 if records else 1)

    def append(self, kind: WalKind, txn_id: TxnId, writes=(), participants=()) -> WalRecord:
        if kind is WalKind.INTENT:
            rec = WalRecord.intent(self.next_sequence, txn_id, writes, participants)
        else:
            rec = WalRecord(self.next_sequence, kind, txn_id)
        self.append_record(rec)
        return rec

    def append_record(self, rec: WalRecord) -> None:
        if rec.sequence != self.next_sequence:
            raise ValueError(f"expected sequence {self.next_sequence}, got {rec.sequence}")
        self.device.append(rec.encode())
        self.next_sequence += 1
        if self.observer is not None:
            self.observer(rec)

    def records(self) -> list[WalRecord]:
        return decode_records(self.device.read_all())


@dataclass
class ReplayResult:
    committed: dict[bytes, bytes] = field(default_factory=dict)
    decisions: dict[TxnId, Outcome] = field(default_factory=dict)
    commit_order: list[TxnId] = field(default_factory=list)
    # txn -> (participants, writes) for INTENTs with no decision record
    in_doubt: dict[TxnId, tuple[frozenset[int], tuple[tuple[bytes, bytes], ...]]] = field(default_factory=dict)


def replay(records: Iterable[WalRecord]) -> ReplayResult:
    """Rebuild committed state from a sequence-ordered log.

    Only transactions with a COMMIT record become visible. An INTENT without a
    decision stays in doubt (its participants and writes are returned so the
    caller can relock the keys and run termination).
    """
    out = ReplayResult()
    pending: dict[TxnId, WalRecord] = {}
    last = 0
    for rec in records:
        if rec.sequence <= last:
            raise CorruptLog(f"sequence {rec.sequence} not increasing")
        last = rec.sequence
        if rec.kind is WalKind.INTENT:
            if rec.txn_id not in out.decisions:
                pending[rec.txn_id] = rec
        elif rec.kind is WalKind.COMMIT:
            intent = pending.pop(rec.txn_id, None)
            if out.decisions.get(rec.txn_id) is Outcome.COMMIT:
                continue
            if intent is not None:
                for key, value in intent.writes:
                    out.committed[key] = value
            out.decisions[rec.txn_id] = Outcome.COMMIT
            out.commit_order.append(rec.txn_id)
        else:
            pending.pop(rec.txn_id, None)
            out.decisions.setdefault(rec.txn_id, Outcome.ABORT)
    for txn, rec in pending.items():
        out.in_doubt[txn] = (rec.participants, rec.writes)
    return out
