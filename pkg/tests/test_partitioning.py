import random

import pytest
from hypothesis import given, strategies as st

from crosskv.partitioning import (DEFAULT_SLOT_COUNT, EmptyTopology, InvalidGroup, NodeGroup, assign_slots,
                                  crc16, hash_tag, key_to_slot, six_node_topology)


def crc16_bitwise(data: bytes) -> int:
    """CRC16/XModem computed one bit at a time (poly 0x1021, init 0, no reflection)."""
    crc = 0
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else crc << 1
            crc &= 0xFFFF
    return crc


def slot_oracle(key: bytes) -> int:
    # written independently of hash_tag: scan for the first '{' by hand
    for i, b in enumerate(key):
        if b == ord("{"):
            for j in range(i + 1, len(key)):
                if key[j] == ord("}"):
                    if j > i + 1:
                        key = key[i + 1 : j]
                    break
            break
    return crc16_bitwise(key) % 16384


def test_crc16_check_value():
    # the standard XModem check string
    assert crc16(b"123456789") == 0x31C3
    assert crc16_bitwise(b"123456789") == 0x31C3


def test_known_slots():
    assert key_to_slot(b"foo") == 12182
    assert key_to_slot(b"") == 0
    assert key_to_slot(b"{user1000}.following") == key_to_slot(b"{user1000}.followers")


def test_crc16_matches_bitwise_oracle_on_random_keys():
    r = random.Random(7)
    for _ in range(5000):
        key = r.randbytes(r.randint(0, 40))
        assert crc16(key) == crc16_bitwise(key)
        assert key_to_slot(key) == slot_oracle(key)


@pytest.mark.parametrize("key,tag", [
    (b"{a}b", b"a"),
    (b"x{a}b{c}", b"a"),
    (b"{}a", b"{}a"),
    (b"{a", b"{a"),
    (b"a}{", b"a}{"),
    (b"}{a}", b"a"),
    (b"{{a}}", b"{a"),
    (b"plain", b"plain"),
])
def test_hash_tag_cases(key, tag):
    assert hash_tag(key) == tag


no_braces = st.binary(max_size=20).filter(lambda b: b"{" not in b and b"}" not in b)


@given(prefix=no_braces, tag=no_braces.filter(bool), suffix=st.binary(max_size=20))
def test_hash_tag_law(prefix, tag, suffix):
    assert key_to_slot(prefix + b"{" + tag + b"}" + suffix) == key_to_slot(tag)


@given(st.binary(max_size=64))
def test_slot_in_range_and_matches_oracle(key):
    s = key_to_slot(key)
    assert 0 <= s < DEFAULT_SLOT_COUNT
    assert s == slot_oracle(key)


@given(st.integers(1, 64), st.integers(64, 20000))
def test_ranges_partition_all_slots(m, n):
    groups = [NodeGroup(f"m{i}") for i in range(m)]
    sm = assign_slots(groups, n)
    ranges = sm.ranges()
    assert ranges[0][0] == 0 and ranges[-1][1] == n - 1
    for (lo, hi), (lo2, _) in zip(ranges, ranges[1:]):
        assert lo <= hi and lo2 == hi + 1
    sizes = [hi - lo + 1 for lo, hi in ranges]
    assert max(sizes) - min(sizes) <= 1
    for slot in {0, n - 1, n // 2, n // 3}:
        lo, hi = ranges[sm.owner(slot)]
        assert lo <= slot <= hi


def test_six_node_ranges():
    sm = assign_slots(six_node_topology())
    assert sm.ranges() == [(0, 5460), (5461, 10921), (10922, 16383)]


def test_bad_topologies():
    with pytest.raises(EmptyTopology):
        assign_slots([])
    with pytest.raises(InvalidGroup):
        assign_slots([NodeGroup("a", ("b",)), NodeGroup("b")])
    with pytest.raises(ValueError):
        assign_slots([NodeGroup("a"), NodeGroup("b")], slot_count=1)
