"""Cluster configuration files for live deployments.

Example::

    [cluster]
    slot_count = 16384
    engine = ha            ; ha | durable
    replication = sync     ; sync | async
    tick_ms = 5
    wal_dir = ./wal

    [node m1]
    addr = 127.0.0.1:7001
    role = master

    [node s1]
    addr = 127.0.0.1:7002
    role = replica-of m1

Groups are formed from the masters in file order; each master's replicas
follow the order they appear in the file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

from .common import ConfigInvalid, EngineMode, ReplicationMode
from .machine import Timing
from .partitioning import DEFAULT_SLOT_COUNT, NodeGroup, SlotMap, assign_slots


@dataclass(frozen=True)
class NodeSpec:
    id: str
    host: str
    port: int
    master_of: str | None = None  # None for a master, else the master it replicates

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple[NodeSpec, ...]
    slot_count: int = DEFAULT_SLOT_COUNT
    engine: EngineMode = EngineMode.HIGHLY_AVAILABLE
    replication: ReplicationMode = ReplicationMode.SYNC
    tick_ms: float = 5.0
    wal_dir: str = "wal"
    timing: Timing = field(default_factory=Timing)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if not ids:
            raise ConfigInvalid("no nodes configured")
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("duplicate node id")
        addrs = [n.addr for n in self.nodes]
        if len(set(addrs)) != len(addrs):
            raise ConfigInvalid("two nodes share an address")
        by_id = {n.id: n for n in self.nodes}
        for n in self.nodes:
            if "/" in n.id or not n.id:
                raise ConfigInvalid(f"invalid node id {n.id!r}")
            if n.master_of is None:
                continue
            target = by_id.get(n.master_of)
            if target is None:
                raise ConfigInvalid(f"node {n.id} is replica-of unknown node {n.master_of!r}")
            if target.master_of is not None:
                raise ConfigInvalid(f"node {n.id} is replica-of {n.master_of}, which is itself a replica")
        if self.tick_ms <= 0:
            raise ConfigInvalid("tick_ms must be positive")
        try:
            assign_slots(self.groups(), self.slot_count)
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def groups(self) -> list[NodeGroup]:
        masters = [n for n in self.nodes if n.master_of is None]
        if not masters:
            raise ConfigInvalid("no master configured")
        return [NodeGroup(m.id, tuple(r.id for r in self.nodes if r.master_of == m.id)) for m in masters]

    def slot_map(self) -> SlotMap:
        return assign_slots(self.groups(), self.slot_count)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ConfigInvalid(f"node {node_id!r} is not in the configuration")

    def wal_path(self, node_id: str) -> str:
        return os.path.join(self.wal_dir, f"{node_id}.wal")

    def with_overrides(self, engine: str | None = None, replication: str | None = None,
                       wal_dir: str | None = None) -> "ClusterConfig":
        changes: dict = {}
        if engine is not None:
            changes["engine"] = _enum(EngineMode, engine, "engine")
        if replication is not None:
            changes["replication"] = _enum(ReplicationMode, replication, "replication")
        if wal_dir is not None:
            changes["wal_dir"] = wal_dir
        return replace(self, **changes) if changes else self

    @classmethod
    def parse(cls, text: str, base_dir: str = ".") -> "ClusterConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigInvalid(f"unreadable config: {exc}") from exc
        cluster = cp["cluster"] if cp.has_section("cluster") else {}
        nodes = []
        for section in cp.sections():
            if section == "cluster":
                continue
            kind, _, node_id = section.partition(" ")
            if kind != "node" or not node_id.strip():
                raise ConfigInvalid(f"unknown section [{section}]")
            sec = cp[section]
            host, port = _addr(sec.get("addr"), node_id)
            role = sec.get("role", "master").split()
            if role == ["master"]:
                master_of = None
            elif len(role) == 2 and role[0] == "replica-of":
                master_of = role[1]
            else:
                raise ConfigInvalid(f"node {node_id}: role must be 'master' or 'replica-of <id>'")
            nodes.append(NodeSpec(node_id.strip(), host, port, master_of))
        try:
            slot_count = int(cluster.get("slot_count", DEFAULT_SLOT_COUNT))
            tick_ms = float(cluster.get("tick_ms", 5))
            timing = Timing(
                max_delay=int(cluster.get("max_delay_ticks", 3)),
                term_timeout=_opt_int(cluster.get("term_timeout_ticks")),
                retry_interval=_opt_int(cluster.get("retry_ticks")),
                repl_timeout=int(cluster.get("repl_timeout_ticks", 100)),
            )
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc
        wal_dir = cluster.get("wal_dir", "wal")
        if not os.path.isabs(wal_dir):
            wal_dir = os.path.join(base_dir, wal_dir)
        return cls(
            nodes=tuple(nodes),
            slot_count=slot_count,
            engine=_enum(EngineMode, cluster.get("engine", "ha"), "engine"),
            replication=_enum(ReplicationMode, cluster.get("replication", "sync"), "replication"),
            tick_ms=tick_ms,
            wal_dir=wal_dir,
            timing=timing,
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClusterConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
        return cls.parse(text, os.path.dirname(os.path.abspath(path)))

    def render(self) -> str:
        lines = ["[cluster]", f"slot_count = {self.slot_count}", f"engine = {self.engine.value}",
                 f"replication = {self.replication.value}", f"tick_ms = {self.tick_ms:g}",
                 f"wal_dir = {self.wal_dir}", f"max_delay_ticks = {self.timing.max_delay}",
                 f"repl_timeout_ticks = {self.timing.repl_timeout}"]
        if self.timing.term_timeout is not None:
            lines.append(f"term_timeout_ticks = {self.timing.term_timeout}")
        if self.timing.retry_interval is not None:
            lines.append(f"retry_ticks = {self.timing.retry_interval}")
        for n in self.nodes:
            role = "master" if n.master_of is None else f"replica-of {n.master_of}"
            lines += ["", f"[node {n.id}]", f"addr = {n.addr}", f"role = {role}"]
        return "\n".join(lines) + "\n"


def _enum(enum_cls, value: str, what: str):
    try:
        return enum_cls(value.strip().lower())
    except ValueError:
        allowed = "|".join(e.value for e in enum_cls)
        raise ConfigInvalid(f"{what} must be one of {allowed}, got {value!r}") from None


def _opt_int(value):
    return None if value is None else int(value)


def _addr(value: str | None, node_id: str) -> tuple[str, int]:
    if not value:
        raise ConfigInvalid(f"node {node_id}: missing addr")
    host, sep, port = value.strip().rpartition(":")
    if not sep or not host:
        raise ConfigInvalid(f"node {node_id}: addr must be host:port, got {value!r}")
    try:
        p = int(port)
    except ValueError:
        raise ConfigInvalid(f"node {node_id}: bad port {port!r}") from None
    if not 0 < p < 65536:
        raise ConfigInvalid(f"node {node_id}: port out of range")
    return host, p


def six_node_config(base_port: int = 7001, host: str = "127.0.0.1", **kw) -> ClusterConfig:
    """Three masters with one replica each, on consecutive ports."""
    nodes = []
    for i in range(3):
        m, s = f"m{i + 1}", f"s{i + 1}"
        nodes.append(NodeSpec(m, host, base_port + 2 * i))
        nodes.append(NodeSpec(s, host, base_port + 2 * i + 1, m))
    return ClusterConfig(tuple(nodes), **kw)
