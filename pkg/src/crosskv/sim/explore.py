"""Exhaustive exploration of a bounded schedule space.

The space is two concurrent three-participant transactions on the six-node
topology with fixed, bounded message delays. A schedule picks

* the start offset of the second transaction,
* whether the two write sets overlap (so one must abort) or not,
* an optional slow group master whose links take longer,
* up to ``max_crashes`` crashes, each a (process, tick) pair.

Crash ticks are odd while every delay, timer and start offset is even, so a
crash always lands strictly between two protocol steps. Every schedule in the
space is run and checked; nothing is sampled.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

from ..commands import Command
from ..partitioning import assign_slots, six_node_topology
from .checkers import (CheckResult, check_agreement, check_all_or_nothing, check_stability,
                       check_termination, check_validity, _Index)
from .simnet import ClientOp, FaultPlan, Flags, Topology, Trace, run

CLIENTS = ("ca", "cb")
DELAY = 2


@dataclass(frozen=True)
class Schedule:
    offset: int
    overlap: bool
    slow: str | None
    crashes: tuple[tuple[int, str], ...]

    def __str__(self) -> str:
        crashes = ",".join(f"{v}@{t}" for t, v in self.crashes) or "none"
        return (f"offset={self.offset} overlap={int(self.overlap)} slow={self.slow or '-'} "
                f"crashes={crashes}")


@dataclass(frozen=True)
class Space:
    offsets: tuple[int, ...] = (0, 2, 4)
    overlaps: tuple[bool, ...] = (True, False)
    slow: tuple[str | None, ...] = (None, "m2")
    crash_ticks: tuple[int, ...] = tuple(range(1, 32, 2))
    victims: tuple[str, ...] = CLIENTS + ("m1", "m2", "m3", "s1", "s2", "s3")
    max_crashes: int = 2

    def crash_sets(self) -> Iterator[tuple[tuple[int, str], ...]]:
        points = [(t, v) for v in self.victims for t in self.crash_ticks]
        for n in range(self.max_crashes + 1):
            for combo in itertools.combinations(points, n):
                # a process crashes at most once (there are no restarts)
                if len({v for _, v in combo}) == n:
                    yield tuple(sorted(combo))

    def crash_set_count(self) -> int:
        count, k = 0, len(self.crash_ticks)
        v = len(self.victims)
        for n in range(self.max_crashes + 1):
            # choose n distinct victims, then a tick for each
            count += _choose(v, n) * k**n
        return count

    def __iter__(self) -> Iterator[Schedule]:
        for offset, overlap, slow in itertools.product(self.offsets, self.overlaps, self.slow):
            for crashes in self.crash_sets():
                yield Schedule(offset, overlap, slow, crashes)

    def __len__(self) -> int:
        return len(self.offsets) * len(self.overlaps) * len(self.slow) * self.crash_set_count()


def _choose(n: int, k: int) -> int:
    from math import comb

    return comb(n, k)


def _keys_per_group(slot_map, count: int, prefix: str) -> list[str]:
    found: dict[int, str] = {}
    i = 0
    while len(found) < count:
        k = f"{prefix}{i}"
        found.setdefault(slot_map.group_of_key(k.encode()), k)
        i += 1
    return [found[g] for g in sorted(found)]


TOPOLOGY = Topology(tuple(six_node_topology()))
_MAP = assign_slots(TOPOLOGY.groups)
_KEYS_A = _keys_per_group(_MAP, 3, "x")
_KEYS_B = _keys_per_group(_MAP, 3, "y")


def workload(s: Schedule) -> list[ClientOp]:
    keys_b = _KEYS_A if s.overlap else _KEYS_B
    a = [w for k in _KEYS_A for w in (k, "A")]
    b = [w for k in keys_b for w in (k, "B")]
    return [ClientOp(0, "ca", Command.of("MSET", *a)), ClientOp(s.offset, "cb", Command.of("MSET", *b))]


def run_schedule(s: Schedule, flags: Flags = Flags(), max_time: int = 400) -> Trace:
    plan = FaultPlan(seed=0, crashes=list(s.crashes), delay=(DELAY, DELAY), max_time=max_time,
                     slow={s.slow: DELAY} if s.slow else {})
    return run(TOPOLOGY, flags, workload(s), plan, trace_messages=False)


SAFETY: tuple[Callable[[object], CheckResult], ...] = (
    check_agreement, check_validity, check_stability, check_all_or_nothing)


@dataclass
class Report:
    total: int = 0
    failures: list[tuple[Schedule, list[CheckResult]]] = field(default_factory=list)
    # schedules in which some in-doubt txn stayed blocked on an unavailable group
    blocked: int = 0
    termination_failures: list[tuple[Schedule, CheckResult]] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def explore(space: Space = Space(), flags: Flags = Flags(), limit: int | None = None,
            on_progress: Callable[[int], None] | None = None) -> Report:
    report = Report()
    start = time.perf_counter()
    for i, s in enumerate(space):
        if limit is not None and i >= limit:
            break
        idx = _Index(run_schedule(s, flags))
        bad = [r for r in (check(idx) for check in SAFETY) if not r.ok]
        if bad:
            report.failures.append((s, bad))
        term = check_termination(idx)
        if term.notes.get("blocked"):
            report.blocked += 1
        if not term.ok:
            report.termination_failures.append((s, term))
        report.total += 1
        if on_progress is not None and report.total % 1000 == 0:
            on_progress(report.total)
    report.elapsed = time.perf_counter() - start
    return report
