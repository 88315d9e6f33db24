"""RESP2 framing: commands in, replies out (and the reverse for the CLI client).

Only simple strings, errors, integers, bulk strings and arrays are supported.
Decoders take a buffer and return ``(value, bytes_consumed)``, or ``None``
when the buffer does not yet hold a complete frame.
"""

from __future__ import annotations

from .commands import Command, ReplyError, Status

CRLF = b"\r\n"


class ProtocolError(Exception):
    """Malformed framing; the connection should be closed."""


def encode_command(cmd: Command) -> bytes:
    parts = cmd.parts()
    out = [b"*%d\r\n" % len(parts)]
    for p in parts:
        out.append(b"$%d\r\n%s\r\n" % (len(p), p))
    return b"".join(out)


def _line(buf: bytes, pos: int) -> tuple[bytes, int] | None:
    end = buf.find(CRLF, pos)
    if end == -1:
        return None
    return buf[pos:end], end + 2


def _int(raw: bytes) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ProtocolError(f"invalid integer {raw!r}") from None


def decode_command(buf: bytes) -> tuple[Command, int] | None:
    if not buf:
        return None
    if buf[:1] != b"*":
        # inline command, as typed into telnet
        got = _line(buf, 0)
        if got is None:
            return None
        line, pos = got
        words = line.split()
        if not words:
            raise ProtocolError("empty inline command")
        return Command.from_parts(words), pos
    got = _line(buf, 1)
    if got is None:
        return None
    raw, pos = got
    count = _int(raw)
    if count < 1:
        raise ProtocolError("command array must not be empty")
    parts = []
    for _ in range(count):
        if pos >= len(buf):
            return None
        if buf[pos : pos + 1] != b"$":
            raise ProtocolError(f"expected '$', got {buf[pos:pos + 1]!r}")
        got = _line(buf, pos + 1)
        if got is None:
            return None
        raw, pos = got
        n = _int(raw)
        if n < 0:
            raise ProtocolError("negative bulk length in command")
        if len(buf) < pos + n + 2:
            return None
        if buf[pos + n : pos + n + 2] != CRLF:
            raise ProtocolError("bulk string not terminated by CRLF")
        parts.append(bytes(buf[pos : pos + n]))
        pos += n + 2
    return Command.from_parts(parts), pos


def encode_reply(reply) -> bytes:
    if reply is None:
        return b"$-1\r\n"
    if isinstance(reply, ReplyError):
        return b"-" + str(reply).encode() + CRLF
    if isinstance(reply, Status):
        return b"+" + str(reply).encode() + CRLF
    if isinstance(reply, bool):
        raise TypeError("booleans are not RESP2 values")
    if isinstance(reply, int):
        return b":%d\r\n" % reply
    if isinstance(reply, (bytes, bytearray)):
        return b"$%d\r\n%s\r\n" % (len(reply), bytes(reply))
    if isinstance(reply, (list, tuple)):
        return b"*%d\r\n" % len(reply) + b"".join(encode_reply(r) for r in reply)
    raise TypeError(f"cannot encode reply of type {type(reply).__name__}")


def decode_reply(buf: bytes, pos: int = 0):
    """Return ``(reply, new_pos)`` or None if incomplete."""
    if pos >= len(buf):
        return None
    tag = buf[pos : pos + 1]
    got = _line(buf, pos + 1)
    if got is None:
        return None
    raw, pos = got
    if tag == b"+":
        return Status(raw.decode()), pos
    if tag == b"-":
        return ReplyError(raw.decode()), pos
    if tag == b":":
        return _int(raw), pos
    if tag == b"$":
        n = _int(raw)
        if n == -1:
            return _Nil, pos
        if len(buf) < pos + n + 2:
            return None
        return bytes(buf[pos : pos + n]), pos + n + 2
    if tag == b"*":
        n = _int(raw)
        if n == -1:
            return _Nil, pos
        items = []
        for _ in range(n):
            got = decode_reply(buf, pos)
            if got is None:
                return None
            item, pos = got
            items.append(None if item is _Nil else item)
        return items, pos
    raise ProtocolError(f"unknown reply type {tag!r}")


class _NilType:
    def __repr__(self) -> str:
        return "nil"


# sentinel so a decoded nil is distinguishable from "incomplete"
_Nil = _NilType()


def parse_reply(buf: bytes):
    """Decode exactly one complete reply; nil becomes None."""
    got = decode_reply(buf)
    if got is None:
        raise ProtocolError("incomplete reply")
    value, pos = got
    if pos != len(buf):
        raise ProtocolError("trailing bytes after reply")
    return None if value is _Nil else value
