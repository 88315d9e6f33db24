import random

import pytest
from hypothesis import given, strategies as st

from crosskv.commands import (OK, ArityError, Command, ReplyError, Status, parse_script_line, render)
from crosskv.resp import ProtocolError, decode_command, decode_reply, encode_command, encode_reply, parse_reply


def random_command(r):
    verb = r.choice(["GET", "SET", "MGET", "MSET", "MULTI", "EXEC", "PING", "CLUSTER"])
    args = [r.randbytes(r.randint(0, 12)) for _ in range(r.randint(0, 6))]
    return Command(verb, tuple(args))


def test_ten_thousand_commands_round_trip():
    r = random.Random(99)
    cmds = [random_command(r) for _ in range(10_000)]
    stream = b"".join(encode_command(c) for c in cmds)
    pos, got = 0, []
    while pos < len(stream):
        cmd, used = decode_command(stream[pos:])
        got.append(cmd)
        pos += used
    assert got == cmds


@given(st.lists(st.binary(max_size=8), min_size=0, max_size=5), st.data())
def test_incremental_decode(args, data):
    raw = encode_command(Command("MSET", tuple(args)))
    cut = data.draw(st.integers(0, len(raw) - 1))
    assert decode_command(raw[:cut]) is None
    assert decode_command(raw) == (Command("MSET", tuple(args)), len(raw))


def test_inline_command():
    assert decode_command(b"get  foo\r\nrest") == (Command.of("GET", "foo"), 10)
    assert decode_command(b"PING") is None


@pytest.mark.parametrize("raw", [b"*0\r\n", b"*1\r\n:5\r\n", b"*1\r\n$-3\r\n", b"*1\r\n$1\r\nab\r\n", b"*x\r\n",
                                 b"\r\n"])
def test_malformed_commands(raw):
    with pytest.raises(ProtocolError):
        decode_command(raw)


replies = st.recursive(
    st.none() | st.integers(-2**40, 2**40) | st.binary(max_size=10)
    | st.text(alphabet="abcXYZ 01", max_size=8).map(Status)
    | st.text(alphabet="abcXYZ 01", max_size=8).map(lambda s: ReplyError("ERR " + s)),
    lambda inner: st.lists(inner, max_size=4), max_leaves=12)


@given(replies)
def test_reply_round_trip(reply):
    assert parse_reply(encode_reply(reply)) == reply


def test_reply_types_preserved():
    assert isinstance(parse_reply(b"+OK\r\n"), Status)
    assert isinstance(parse_reply(b"-ERR x\r\n"), ReplyError)
    assert parse_reply(b"*2\r\n$-1\r\n:1\r\n") == [None, 1]
    assert decode_reply(b"$5\r\nab") is None
    with pytest.raises(TypeError):
        encode_reply(True)


def test_arity():
    for cmd in (Command.of("GET"), Command.of("MSET", "a"), Command.of("SET", "a"), Command.of("MULTI", "x")):
        with pytest.raises(ArityError):
            cmd.check_arity()
    Command.of("MSET", "a", "1", "b", "2").check_arity()
    Command.of("UNKNOWN", "x").check_arity()  # unknown verbs are rejected later, by the session


def test_script_lines_and_render():
    assert parse_script_line("  # comment") is None
    assert parse_script_line('set k "two words"') == Command.of("SET", "k", "two words")
    assert render([b"a", None, 3, OK, ReplyError("ERR x")]) == "[a, (nil), (integer) 3, OK, (error) ERR x]"
