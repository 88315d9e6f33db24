"""Deterministic discrete-event simulation of a whole cluster.

Everything runs on an integer tick clock in a single thread. Events are
ordered by ``(tick, insertion sequence)`` and all randomness (message delays,
drops) comes from one ``random.Random(plan.seed)``, so a run is a pure
function of its inputs and two runs with equal inputs yield identical traces.

The failure detector is perfect: a crashed master is replaced by its first
live in-sync replica ``detect_delay`` ticks after the crash.
"""

from __future__ import annotations

import heapq
import random
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, NamedTuple

from ..client import Client
from ..commands import Command
from ..common import ConfigInvalid, EngineMode, ReplicationMode, TxnId, show_bytes
from ..machine import ClusterView, Effects, Timing
from ..node import Node
from ..partitioning import DEFAULT_SLOT_COUNT, NodeGroup, SlotMap, assign_slots
from ..protocol import REPLICATION_KINDS, Message
from ..replication import NoLiveReplica, promote
from ..wal import MemoryDevice, WalIoError, WriteAheadLog


@dataclass(frozen=True)
class Topology:
    groups: tuple[NodeGroup, ...]
    slot_count: int = DEFAULT_SLOT_COUNT

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def nodes(self) -> list[str]:
        return [m for g in self.groups for m in g.members]


@dataclass(frozen=True)
class Flags:
    engine: EngineMode = EngineMode.HIGHLY_AVAILABLE
    replication: ReplicationMode = ReplicationMode.SYNC
    timing: Timing = Timing()


@dataclass
class FaultPlan:
    seed: int = 0
    crashes: list[tuple[int, str]] = field(default_factory=list)
    restarts: list[tuple[int, str]] = field(default_factory=list)
    drop: Fraction = Fraction(0)
    delay: tuple[int, int] = (1, 3)
    # crash ``victim`` right after a trace event of ``kind`` whose fields match
    crash_on: list[tuple[str, dict, str]] = field(default_factory=list)
    # extra delay on every message to or from these processes
    slow: dict[str, int] = field(default_factory=dict)
    # node -> (fail on this WAL append, leave a torn half-record)
    wal_faults: dict[str, tuple[int, bool]] = field(default_factory=dict)
    max_time: int = 200_000


@dataclass(frozen=True)
class ClientOp:
    at: int
    session: str
    command: Command


class TraceEvent(NamedTuple):
    at: int
    seq: int
    kind: str
    fields: dict

    def line(self) -> str:
        parts = [str(self.at), str(self.seq), self.kind]
        parts += [f"{k}={fmt(v)}" for k, v in self.fields.items()]
        return " ".join(parts)


def fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (bytes, bytearray)):
        return show_bytes(bytes(v))
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ",".join(f"{fmt(k)}={fmt(x)}" for k, x in v.items()) + "}"
    if isinstance(v, str):
        return v.replace(" ", "_") if v else '""'
    return str(v)


class Trace:
    def __init__(self, events: Iterable[TraceEvent] = ()):
        self.events: list[TraceEvent] = list(events)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def of(self, *kinds: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def lines(self) -> list[str]:
        return [e.line() for e in self.events]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def digest(self) -> str:
        crc = 0
        for line in self.lines():
            crc = zlib.crc32(line.encode() + b"\n", crc)
        return f"{crc:08x}"

    def replies(self, client: str | None = None) -> list[tuple[str, str, str]]:
        return [(e.fields["client"], e.fields["cmd"], e.fields["reply"]) for e in self.events
                if e.kind == "REPLY" and (client is None or e.fields["client"] == client)]

    @property
    def config(self) -> dict:
        for e in self.events:
            if e.kind == "RUN":
                return e.fields
        return {}


_DELIVER, _TIMER, _CRASH, _RESTART, _OP, _DETECT = range(6)


class Simulator:
    def __init__(self, topology: Topology, flags: Flags = Flags(), plan: FaultPlan | None = None,
                 trace_messages: bool = True):
        plan = plan or FaultPlan()
        if not topology.groups:
            raise ConfigInvalid("topology has no groups")
        lo, hi = plan.delay
        if not 1 <= lo <= hi:
            raise ConfigInvalid(f"delay bounds must satisfy 1 <= min <= max, got {plan.delay}")
        if not 0 <= plan.drop < 1:
            raise ConfigInvalid("drop probability must be in [0, 1)")
        self.topology = topology
        self.flags = replace(flags, timing=replace(flags.timing, min_delay=lo, max_delay=hi))
        self.plan = plan
        self.trace_messages = trace_messages
        self.rng = random.Random(plan.seed)
        self.slot_map: SlotMap = assign_slots(topology.groups, topology.slot_count)
        self.view = ClusterView(tuple(topology.groups))
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self._urgent: deque = deque()
        self.trace = Trace()
        self.procs: dict[str, Node | Client] = {}
        self.alive: set[str] = set()
        self.incarnation: dict[str, int] = {}
        self.devices: dict[str, MemoryDevice] = {}
        self._link_last: dict[tuple[str, str], int] = {}
        self._dead_nodes: dict[str, Node] = {}
        self._crash_on = list(plan.crash_on)
        self._drop = float(plan.drop)
        self.quiescent = True
        self._record("RUN", engine=self.flags.engine.value, replication=self.flags.replication.value,
                     groups=[list(g.members) for g in topology.groups], seed=plan.seed)
        for node_id in topology.nodes:
            if node_id in self.incarnation:
                raise ConfigInvalid(f"duplicate node {node_id!r}")
            self.incarnation[node_id] = 0
            self._boot_node(node_id, first=True)
        for at, node in plan.crashes:
            self._push(at, _CRASH, node)
        for at, node in plan.restarts:
            self._push(at, _RESTART, node)

    # --------------------------------------------------------------- set-up

    def _boot_node(self, node_id: str, first: bool) -> None:
        f = self.flags
        if f.engine is EngineMode.DURABLE:
            if node_id not in self.devices:
                fail, torn = self.plan.wal_faults.get(node_id, (None, False))
                self.devices[node_id] = MemoryDevice(fail, torn)
            dev = self.devices[node_id]
            if first:
                node = Node(node_id, self.slot_map, self.view, f.engine, f.replication, f.timing,
                            WriteAheadLog.open(dev))
            else:
                dev.fail_after = None
                node = Node.recover(node_id, self.slot_map, self.view, WriteAheadLog.open(dev), f.timing)
                r = node.recovered
                self._record("RECOVERED", node=node_id, kv=sorted(r.committed.items()),
                             commits=list(r.commit_order), in_doubt=sorted(r.in_doubt))
        elif first:
            node = Node(node_id, self.slot_map, self.view, f.engine, f.replication, f.timing)
        else:
            node = Node.rejoin(node_id, self.slot_map, self.view, f.engine, f.replication, f.timing)
        if node.store.wal is not None:
            node.store.wal.observer = lambda rec, n=node_id: self._record(
                "WAL_APPEND", node=n, seq=rec.sequence, kind=rec.kind.name, txn=rec.txn_id)
        self.procs[node_id] = node
        self.alive.add(node_id)
        self._handle(node_id, node.start)

    def add_client(self, client_id: str) -> Client:
        if client_id in self.procs:
            raise ConfigInvalid(f"client id {client_id!r} collides with an existing process")
        self.incarnation[client_id] = 0
        c = Client(client_id, self.slot_map, self.view, self.flags.timing)
        self.procs[client_id] = c
        self.alive.add(client_id)
        return c

    def submit(self, at: int, session: str, command: Command) -> None:
        if session not in self.procs:
            self.add_client(session)
        self._push(at, _OP, (session, command))

    # ------------------------------------------------------------ machinery

    def _push(self, at: int, etype: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, etype, payload))

    def _record(self, kind: str, /, **fields) -> None:
        self._seq += 1
        self.trace.events.append(TraceEvent(self.now, self._seq, kind, fields))
        if self._crash_on:
            for trig in list(self._crash_on):
                want, match, victim = trig
                if want == kind and all(fields.get(k) == v for k, v in match.items()):
                    self._crash_on.remove(trig)
                    self._urgent.append((_CRASH, victim))

    def _handle(self, proc: str, fn, *args) -> None:
        ctx = Effects(self.now)
        try:
            fn(*args, ctx)
        except WalIoError as exc:
            self._record("WAL_FAILURE", node=proc, detail=str(exc))
            self._crash(proc)
            return
        for kind, fields in ctx.events:
            self._record(kind, **fields)
        inc = self.incarnation[proc]
        for delay, key in ctx.timers:
            self._push(self.now + delay, _TIMER, (proc, inc, key))
        for msg in ctx.out:
            self._send(msg)

    def _send(self, msg: Message) -> None:
        if self.trace_messages:
            self._record("SEND", src=msg.src, dst=msg.dst, msg=msg.kind.name, txn=msg.txn)
        if msg.dst not in self.alive:
            if self.trace_messages:
                self._record("LOST", src=msg.src, dst=msg.dst, msg=msg.kind.name, txn=msg.txn)
            return
        if self._drop and msg.kind not in REPLICATION_KINDS and self.rng.random() < self._drop:
            self._record("DROP", src=msg.src, dst=msg.dst, msg=msg.kind.name, txn=msg.txn)
            return
        lo, hi = self.plan.delay
        at = self.now + (lo if lo == hi else self.rng.randint(lo, hi))
        if self.plan.slow:
            at += self.plan.slow.get(msg.src, 0) + self.plan.slow.get(msg.dst, 0)
        link = (msg.src, msg.dst)
        last = self._link_last.get(link, 0)
        if at < last:
            at = last  # per-link FIFO
        self._link_last[link] = at
        self._push(at, _DELIVER, (msg, self.incarnation[msg.dst]))

    def _crash(self, proc: str) -> None:
        if proc not in self.alive:
            return
        self.alive.discard(proc)
        self.incarnation[proc] += 1
        self._record("CRASH", node=proc)
        machine = self.procs[proc]
        if isinstance(machine, Node):
            self._dead_nodes[proc] = machine
            g = machine.group
            if (self.flags.engine is EngineMode.HIGHLY_AVAILABLE and self.view.master(g) == proc):
                self._push(self.now + self.flags.timing.detect_delay, _DETECT, (g, proc))

    def _detect(self, group: int, failed: str) -> None:
        current = self.view.groups[group]
        if current.master != failed or failed in self.alive:
            return
        old = self._dead_nodes.get(failed)
        eligible = set(old.replicator.in_sync) if old is not None and old.replicator is not None else set()
        # a replica that restarted since holds nothing until its resync completes
        eligible = {r for r in eligible if r in self.alive and not self.procs[r].state.resyncing}
        groups = list(self.view.groups)
        try:
            groups[group] = promote(current, failed, self.alive, eligible)
        except NoLiveReplica:
            self._record("GROUP_UNAVAILABLE", group=group, failed=failed)
            self._publish(ClusterView(tuple(groups), self.view.epoch + 1,
                                      self.view.unavailable | {group}))
            return
        self._record("PROMOTE", group=group, failed=failed, master=groups[group].master)
        self._publish(ClusterView(tuple(groups), self.view.epoch + 1, self.view.unavailable))

    def _publish(self, view: ClusterView) -> None:
        self.view = view
        self._record("VIEW", epoch=view.epoch, masters=[g.master for g in view.groups],
                     unavailable=sorted(view.unavailable))
        for proc in sorted(self.alive):
            self._handle(proc, self.procs[proc].on_view, view)

    def _restart(self, proc: str) -> None:
        if proc in self.alive:
            return
        self._record("RESTART", node=proc)
        machine = self.procs[proc]
        if isinstance(machine, Client):
            c = Client(proc, self.slot_map, self.view, self.flags.timing)
            # a restarted client must never reuse a transaction id
            c.counter = self.incarnation[proc] << 32
            self.procs[proc] = c
            self.alive.add(proc)
            return
        g = machine.group
        if self.flags.engine is EngineMode.HIGHLY_AVAILABLE and self.view.groups[g].master == proc:
            if g not in self.view.unavailable:
                # a master that lost its memory must not resume before failover ran
                self._detect(g, proc)
        if self.flags.engine is EngineMode.HIGHLY_AVAILABLE and g in self.view.unavailable:
            # every copy of the group's state is gone; the first member back restarts it empty
            old = self.view.groups[g]
            groups = list(self.view.groups)
            groups[g] = NodeGroup(proc, tuple(m for m in old.members if m != proc))
            self._record("GROUP_RESTORED", group=g, master=proc, lost=True)
            self.view = ClusterView(tuple(groups), self.view.epoch + 1, self.view.unavailable - {g})
            self._boot_node(proc, first=False)
            self._publish(self.view)
            return
        self._boot_node(proc, first=False)

    # ------------------------------------------------------------------ run

    def step(self) -> bool:
        if self._urgent:
            etype, payload = self._urgent.popleft()
        else:
            if not self._heap:
                return False
            at, _, etype, payload = heapq.heappop(self._heap)
            if at > self.plan.max_time:
                self._heap.clear()
                self.quiescent = False
                return False
            self.now = at
        if etype == _DELIVER:
            msg, inc = payload
            if msg.dst in self.alive and self.incarnation[msg.dst] == inc:
                if self.trace_messages:
                    self._record("DELIVER", src=msg.src, dst=msg.dst, msg=msg.kind.name, txn=msg.txn)
                self._handle(msg.dst, self.procs[msg.dst].on_message, msg)
        elif etype == _TIMER:
            proc, inc, key = payload
            if proc in self.alive and self.incarnation[proc] == inc:
                self._handle(proc, self.procs[proc].on_timer, key)
        elif etype == _OP:
            session, cmd = payload
            if session in self.alive:
                self._record("CLIENT_OP", client=session, cmd=str(cmd))
                self._handle(session, self.procs[session].submit, cmd)
        elif etype == _CRASH:
            self._crash(payload)
        elif etype == _RESTART:
            self._restart(payload)
        elif etype == _DETECT:
            self._detect(*payload)
        return True

    def run(self) -> Trace:
        while self.step():
            pass
        self._finish()
        return self.trace

    def _finish(self) -> None:
        self._record("END", quiescent=self.quiescent, view=[g.master for g in self.view.groups],
                     unavailable=sorted(self.view.unavailable))
        for proc in sorted(self.procs):
            m = self.procs[proc]
            if not isinstance(m, Node):
                continue
            alive = proc in self.alive
            if not alive:
                self._record("FINAL", node=proc, group=m.group, alive=False)
                continue
            d = m.describe()
            store = m.store
            self._record("FINAL", node=proc, group=m.group, alive=True, role=d["role"],
                         in_sync=d["in_sync"], kv=sorted(d["committed"].items()),
                         commits=d["commit_log"],
                         aborts=sorted(t for t, o in store.decisions.items() if o.value == "abort"),
                         in_doubt=sorted(d["in_doubt"]))

    def node(self, node_id: str) -> Node:
        return self.procs[node_id]

    def client(self, client_id: str) -> Client:
        return self.procs[client_id]


def run(topology: Topology, flags: Flags, workload: Iterable[ClientOp], plan: FaultPlan | None = None,
        trace_messages: bool = True) -> Trace:
    sim = Simulator(topology, flags, plan, trace_messages)
    for op in workload:
        sim.submit(op.at, op.session, op.command)
    return sim.run()


def txn_label(txn: TxnId) -> str:
    return str(txn)
