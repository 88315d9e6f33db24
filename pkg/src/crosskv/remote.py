"""Blocking RESP connection to a live node, used by the CLI and tests."""

from __future__ import annotations

import socket

from .commands import Command
from .resp import decode_reply, encode_command, parse_reply


class ConnectFailure(OSError):
    pass


class RespConnection:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectFailure(f"cannot connect to {host}:{port}: {exc}") from exc
        self.buf = b""

    @classmethod
    def to(cls, addr: str, timeout: float = 10.0) -> "RespConnection":
        host, _, port = addr.rpartition(":")
        if not host or not port.isdigit():
            raise ConnectFailure(f"address must be host:port, got {addr!r}")
        return cls(host, int(port), timeout)

    def call(self, cmd: Command | str, *args):
        if isinstance(cmd, str):
            cmd = Command.of(cmd, *args)
        self.sock.sendall(encode_command(cmd))
        while True:
            got = decode_reply(self.buf)
            if got is not None:
                _, pos = got
                reply = parse_reply(self.buf[:pos])
                self.buf = self.buf[pos:]
                return reply
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionError("connection closed by server")
            self.buf += data

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
