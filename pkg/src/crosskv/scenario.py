"""Simulation scenario files.

Example::

    [topology]
    groups = m1:s1 m2:s2 m3:s3      ; master:replica[:replica...] per group
    slot_count = 16384

    [mode]
    engine = ha
    replication = sync

    [workload]
    ops =
        0  c1 MSET a 1 b 2
        5  c2 MGET a b

    [faults]
    seed = 7
    drop = 1/20
    delay = 1-3
    crashes = 12 m1, 40 c1
    restarts = 80 m1
    max_time = 5000
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from fractions import Fraction

from .commands import parse_script_line
from .common import ConfigInvalid, EngineMode, ReplicationMode
from .partitioning import DEFAULT_SLOT_COUNT, NodeGroup
from .sim.simnet import ClientOp, FaultPlan, Flags, Topology


@dataclass
class Scenario:
    topology: Topology
    flags: Flags
    workload: list[ClientOp]
    plan: FaultPlan


def _groups(text: str) -> tuple[NodeGroup, ...]:
    out = []
    for word in text.replace(",", " ").split():
        members = word.split(":")
        if any(not m for m in members):
            raise ConfigInvalid(f"bad group {word!r}")
        out.append(NodeGroup(members[0], tuple(members[1:])))
    if not out:
        raise ConfigInvalid("topology needs at least one group")
    return tuple(out)


def _events(text: str, what: str) -> list[tuple[int, str]]:
    out = []
    for item in text.replace("\n", ",").split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split()
        if len(parts) != 2:
            raise ConfigInvalid(f"{what} entries are '<tick> <process>', got {item!r}")
        out.append((_int(parts[0], what), parts[1]))
    return out


def _int(raw: str, what: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigInvalid(f"{what}: expected an integer, got {raw!r}") from None


def _enum(enum_cls, raw: str, what: str):
    try:
        return enum_cls(raw.strip().lower())
    except ValueError:
        raise ConfigInvalid(f"{what}: unknown value {raw!r}") from None


def parse_scenario(text: str) -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(f"unreadable scenario: {exc}") from exc
    for section in cp.sections():
        if section not in ("topology", "mode", "workload", "faults"):
            raise ConfigInvalid(f"unknown section [{section}]")
    topo = cp["topology"] if cp.has_section("topology") else {}
    groups = _groups(topo.get("groups", "m1:s1 m2:s2 m3:s3"))
    topology = Topology(groups, _int(topo.get("slot_count", str(DEFAULT_SLOT_COUNT)), "slot_count"))

    mode = cp["mode"] if cp.has_section("mode") else {}
    flags = Flags(_enum(EngineMode, mode.get("engine", "ha"), "engine"),
                  _enum(ReplicationMode, mode.get("replication", "sync"), "replication"))

    workload = []
    ops = cp["workload"].get("ops", "") if cp.has_section("workload") else ""
    for line in ops.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 2)
        if len(parts) < 3:
            raise ConfigInvalid(f"workload lines are '<tick> <session> <command>', got {line!r}")
        cmd = parse_script_line(parts[2])
        workload.append(ClientOp(_int(parts[0], "workload tick"), parts[1], cmd))

    faults = cp["faults"] if cp.has_section("faults") else {}
    try:
        drop = Fraction(faults.get("drop", "0"))
    except (ValueError, ZeroDivisionError):
        raise ConfigInvalid(f"drop: not a fraction: {faults.get('drop')!r}") from None
    lo, _, hi = faults.get("delay", "1-3").partition("-")
    delay = (_int(lo, "delay"), _int(hi or lo, "delay"))
    plan = FaultPlan(
        seed=_int(faults.get("seed", "0"), "seed"),
        crashes=_events(faults.get("crashes", ""), "crashes"),
        restarts=_events(faults.get("restarts", ""), "restarts"),
        drop=drop,
        delay=delay,
        max_time=_int(faults.get("max_time", "200000"), "max_time"),
    )
    return Scenario(topology, flags, workload, plan)


def load_scenario(path: str | os.PathLike) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_scenario(fh.read())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
