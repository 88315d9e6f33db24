"""Client command and reply values, independent of the wire encoding."""

from __future__ import annotations

from dataclasses import dataclass

# verb -> (min args, max args or None, args must be even)
ARITY = {
    "GET": (1, 1, False),
    "SET": (2, 2, False),
    "MGET": (1, None, False),
    "MSET": (2, None, True),
    "MULTI": (0, 0, False),
    "EXEC": (0, 0, False),
    "DISCARD": (0, 0, False),
    "PING": (0, 1, False),
    "CLUSTER": (1, 2, False),
}

TXN_VERBS = frozenset({"GET", "SET", "MGET", "MSET", "MULTI", "EXEC", "DISCARD"})
QUEUEABLE = frozenset({"GET", "SET", "MGET", "MSET"})
WRITES = frozenset({"SET", "MSET"})


class Status(str):
    """A RESP simple-string reply such as ``OK`` or ``QUEUED``."""

    def __repr__(self) -> str:
        return f"Status({str(self)!r})"


class ReplyError(str):
    """A RESP error reply; the text starts with an error code like ``ERR``."""

    def __repr__(self) -> str:
        return f"ReplyError({str(self)!r})"


OK = Status("OK")
QUEUED = Status("QUEUED")
PONG = Status("PONG")
ABORTED = ReplyError("ABORTED transaction aborted by the commit protocol")


class NestedMulti(Exception):
    pass


class QueueVerbInvalid(Exception):
    pass


class ArityError(ValueError):
    pass


@dataclass(frozen=True)
class Command:
    verb: str
    args: tuple[bytes, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "verb", self.verb.upper())
        if not isinstance(self.args, tuple):
            object.__setattr__(self, "args", tuple(self.args))

    @classmethod
    def of(cls, verb: str, *args) -> "Command":
        return cls(verb, tuple(a.encode() if isinstance(a, str) else bytes(a) for a in args))

    @classmethod
    def from_parts(cls, parts: list[bytes]) -> "Command":
        return cls(parts[0].decode("utf-8", "replace"), tuple(parts[1:]))

    def parts(self) -> list[bytes]:
        return [self.verb.encode()] + list(self.args)

    def check_arity(self) -> None:
        spec = ARITY.get(self.verb)
        if spec is None:
            return
        lo, hi, even = spec
        n = len(self.args)
        if n < lo or (hi is not None and n > hi) or (even and n % 2):
            raise ArityError(f"ERR wrong number of arguments for '{self.verb.lower()}' command")

    @property
    def keys(self) -> tuple[bytes, ...]:
        if self.verb in ("GET", "MGET"):
            return self.args
        if self.verb == "SET":
            return self.args[:1]
        if self.verb == "MSET":
            return self.args[0::2]
        return ()

    def pairs(self) -> list[tuple[bytes, bytes]]:
        return list(zip(self.args[0::2], self.args[1::2]))

    def __str__(self) -> str:
        return " ".join([self.verb] + [a.decode("utf-8", "backslashreplace") for a in self.args])


def parse_script_line(line: str) -> Command | None:
    """One command per line, whitespace separated, ``#`` comments; double quotes group words."""
    import shlex

    line = line.strip()
    if not line or line.startswith("#"):
        return None
    words = shlex.split(line)
    return Command.of(words[0], *words[1:])


def render(reply) -> str:
    """Human-readable reply text, as printed by the CLI and recorded in traces."""
    if reply is None:
        return "(nil)"
    if isinstance(reply, ReplyError):
        return f"(error) {reply}"
    if isinstance(reply, Status):
        return str(reply)
    if isinstance(reply, int):
        return f"(integer) {reply}"
    if isinstance(reply, bytes):
        return reply.decode("utf-8", "backslashreplace")
    if isinstance(reply, list):
        return "[" + ", ".join(render(r) for r in reply) + "]"
    return repr(reply)
