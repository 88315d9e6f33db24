import pytest
from hypothesis import given, strategies as st

from crosskv.common import Outcome, TxnId
from crosskv.wal import (CorruptLog, FileDevice, MemoryDevice, WalIoError, WalKind, WalRecord, WriteAheadLog,
                         decode_records, replay)

T1, T2, T3 = (TxnId.new("c", i) for i in (1, 2, 3))


def test_round_trip_file(tmp_path):
    dev = FileDevice(tmp_path / "n.wal")
    wal = WriteAheadLog.open(dev)
    wal.append(WalKind.INTENT, T1, [(b"a", b"1"), (b"b", b"")], participants={0, 2})
    wal.append(WalKind.COMMIT, T1)
    wal.append(WalKind.ABORT, T2)
    dev.close()
    wal = WriteAheadLog.open(FileDevice(tmp_path / "n.wal"))
    recs = wal.records()
    assert [r.kind for r in recs] == [WalKind.INTENT, WalKind.COMMIT, WalKind.ABORT]
    assert recs[0].writes == ((b"a", b"1"), (b"b", b""))
    assert recs[0].participants == {0, 2}
    assert wal.next_sequence == 4


records = st.lists(
    st.tuples(st.sampled_from(list(WalKind)), st.integers(0, 5),
              st.lists(st.tuples(st.binary(max_size=8), st.binary(max_size=8)), max_size=4),
              st.frozensets(st.integers(0, 5), max_size=3)),
    max_size=12)


@given(records)
def test_encode_decode_property(specs):
    wal = WriteAheadLog(MemoryDevice())
    for kind, c, writes, parts in specs:
        wal.append(kind, TxnId.new("x", c), writes, parts)
    got = wal.records()
    assert len(got) == len(specs)
    for rec, (kind, c, writes, parts) in zip(got, specs):
        assert rec.kind is kind and rec.txn_id == TxnId.new("x", c)
        if kind is WalKind.INTENT:
            assert list(rec.writes) == writes and rec.participants == parts


@given(records, st.data())
def test_torn_tail_drops_only_last_record(specs, data):
    wal = WriteAheadLog(MemoryDevice())
    for kind, c, writes, parts in specs:
        wal.append(kind, TxnId.new("x", c), writes, parts)
    raw = wal.device.read_all()
    full = decode_records(raw)
    if not full:
        return
    last_len = len(full[-1].encode())
    cut = data.draw(st.integers(1, last_len - 1))
    assert decode_records(raw[:-cut]) == full[:-1]


def test_corruption_in_middle_is_detected():
    wal = WriteAheadLog(MemoryDevice())
    wal.append(WalKind.INTENT, T1, [(b"k", b"v")], {0})
    wal.append(WalKind.COMMIT, T1)
    raw = bytearray(wal.device.read_all())
    raw[10] ^= 0xFF
    with pytest.raises(CorruptLog):
        decode_records(bytes(raw))


def test_corrupt_last_record_is_a_torn_tail():
    wal = WriteAheadLog(MemoryDevice())
    wal.append(WalKind.INTENT, T1, [(b"k", b"v")], {0})
    wal.append(WalKind.COMMIT, T1)
    raw = bytearray(wal.device.read_all())
    raw[-1] ^= 0xFF
    assert len(decode_records(bytes(raw))) == 1


def test_sequence_must_increase():
    a = WalRecord(2, WalKind.COMMIT, T1).encode()
    b = WalRecord(1, WalKind.COMMIT, T2).encode()
    with pytest.raises(CorruptLog):
        decode_records(a + b)
    wal = WriteAheadLog(MemoryDevice())
    with pytest.raises(ValueError):
        wal.append_record(WalRecord(5, WalKind.COMMIT, T1))


def test_injected_failure_and_torn_write():
    dev = MemoryDevice(fail_after=2, torn=True)
    wal = WriteAheadLog(dev)
    wal.append(WalKind.INTENT, T1, [(b"k", b"v")], {0})
    with pytest.raises(WalIoError):
        wal.append(WalKind.COMMIT, T1)
    assert len(dev.data) > len(WalRecord.intent(1, T1, [(b"k", b"v")], {0}).encode())
    assert [r.kind for r in decode_records(dev.read_all())] == [WalKind.INTENT]


def test_replay_commit_abort_and_in_doubt():
    wal = WriteAheadLog(MemoryDevice())
    wal.append(WalKind.INTENT, T1, [(b"a", b"1")], {0, 1})
    wal.append(WalKind.INTENT, T2, [(b"b", b"2")], {0})
    wal.append(WalKind.INTENT, T3, [(b"c", b"3")], {0, 2})
    wal.append(WalKind.COMMIT, T1)
    wal.append(WalKind.ABORT, T2)
    r = replay(wal.records())
    assert r.committed == {b"a": b"1"}
    assert r.decisions == {T1: Outcome.COMMIT, T2: Outcome.ABORT}
    assert r.commit_order == [T1]
    assert r.in_doubt == {T3: (frozenset({0, 2}), ((b"c", b"3"),))}


def test_replay_commit_without_local_intent_is_a_decision_only():
    wal = WriteAheadLog(MemoryDevice())
    wal.append(WalKind.COMMIT, T1)
    r = replay(wal.records())
    assert r.committed == {} and r.decisions == {T1: Outcome.COMMIT}


def test_replay_is_idempotent_on_duplicate_commit():
    wal = WriteAheadLog(MemoryDevice())
    wal.append(WalKind.INTENT, T1, [(b"a", b"1")], {0})
    wal.append(WalKind.COMMIT, T1)
    wal.append(WalKind.COMMIT, T1)
    assert replay(wal.records()).commit_order == [T1]


def test_reopen_cuts_torn_tail_before_appending(tmp_path):
    path = tmp_path / "n.wal"
    wal = WriteAheadLog.open(FileDevice(path))
    wal.append(WalKind.INTENT, T1, [(b"a", b"1")], {0})
    good = path.stat().st_size
    with open(path, "ab") as fh:
        fh.write(WalRecord(2, WalKind.COMMIT, T1).encode()[:7])
    wal.device.close()
    wal = WriteAheadLog.open(FileDevice(path))
    assert path.stat().st_size == good and wal.next_sequence == 2
    wal.append(WalKind.COMMIT, T1)
    assert [r.kind for r in wal.records()] == [WalKind.INTENT, WalKind.COMMIT]
