"""Plumbing shared by the node and client state machines.

State machines never talk to a clock, a socket or a log directly: each
handler receives an :class:`Effects` collector carrying the current tick and
returns by filling it with messages to send, timers to arm and trace events.
The simulator and the live server are two drivers for the same machines.
"""

from __future__ import annotations

from dataclasses import dataclass

from .partitioning import NodeGroup
from .protocol import Message


@dataclass(frozen=True)
class Timing:
    """Protocol timeouts in ticks. ``None`` fields derive from the delay bound."""

    min_delay: int = 1
    max_delay: int = 3
    term_timeout: int | None = None
    retry_interval: int | None = None
    repl_timeout: int = 100
    detect_delay: int = 0

    @property
    def rtt(self) -> int:
        return 2 * self.max_delay

    @property
    def termination(self) -> int:
        return self.term_timeout if self.term_timeout is not None else 10 * self.rtt

    @property
    def retry(self) -> int:
        # long enough for a prewrite plus its replication round trip
        return self.retry_interval if self.retry_interval is not None else 5 * self.rtt


@dataclass(frozen=True)
class ClusterView:
    """Current master/replica roles per group, as published by the failure detector."""

    groups: tuple[NodeGroup, ...]
    epoch: int = 0
    unavailable: frozenset[int] = frozenset()

    def master(self, group: int) -> str | None:
        if group in self.unavailable:
            return None
        return self.groups[group].master

    def group_of(self, node: str) -> int:
        for i, g in enumerate(self.groups):
            if node in g.members:
                return i
        raise KeyError(node)


class Effects:
    __slots__ = ("now", "out", "timers", "events")

    def __init__(self, now: int):
        self.now = now
        self.out: list[Message] = []
        self.timers: list[tuple[int, tuple]] = []
        self.events: list[tuple[str, dict]] = []

    def send(self, msg: Message) -> None:
        self.out.append(msg)

    def timer(self, delay: int, key: tuple) -> None:
        self.timers.append((delay, key))

    def event(self, kind: str, /, **fields) -> None:
        self.events.append((kind, fields))
