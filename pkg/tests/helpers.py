"""Workload and topology helpers shared by the tests."""

import random
import socket

from crosskv.commands import Command
from crosskv.partitioning import assign_slots, six_node_topology
from crosskv.sim.simnet import ClientOp, Topology

GROUPS = six_node_topology()
TOPOLOGY = Topology(tuple(GROUPS))
SLOT_MAP = assign_slots(GROUPS)
NODES = [m for g in GROUPS for m in g.members]


def keys_by_group(prefix="k", per_group=4):
    """Deterministic keys, ``per_group`` owned by each group."""
    out = {g: [] for g in range(len(GROUPS))}
    i = 0
    while any(len(v) < per_group for v in out.values()):
        k = f"{prefix}{i}"
        g = SLOT_MAP.group_of_key(k.encode())
        if len(out[g]) < per_group:
            out[g].append(k)
        i += 1
    return out


def cross_node_workload(seed, n_txns=20, keys_per_group=4, reads=True, disjoint=False):
    """``n_txns`` concurrent clients, each writing keys on two or three groups.

    With ``disjoint`` every client writes its own keys, so no lock conflicts arise.
    """
    r = random.Random(seed)
    by_group = keys_by_group("k", n_txns if disjoint else keys_per_group)
    ops = []
    for i in range(n_txns):
        groups = r.sample(sorted(by_group), r.choice((2, 3)))
        keys = [by_group[g][i] if disjoint else r.choice(by_group[g]) for g in groups]
        args = [w for k in keys for w in (k, f"v{seed}.{i}")]
        ops.append(ClientOp(r.randint(0, 10), f"c{i}", Command.of("MSET", *args)))
        if reads:
            ops.append(ClientOp(r.randint(0, 30), f"c{i}", Command.of("MGET", *keys)))
    return ops


def free_ports(n):
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def last_yes_trigger(trace, client):
    """The VOTE_CAST after which every participant of ``client``'s first txn has voted YES.

    Returns ``(txn, crash_on entry)`` so a rerun with the same inputs crashes
    the client at exactly that instant.
    """
    begin = next(e for e in trace.of("TXN_BEGIN") if e.fields["client"] == client)
    txn = begin.fields["txn"]
    firsts = {}
    for e in trace.of("VOTE_CAST"):
        f = e.fields
        if f["txn"] == txn and f["vote"] == "yes" and f["group"] not in firsts:
            firsts[f["group"]] = e
    if set(firsts) != set(begin.fields["participants"]):
        return txn, None
    last = max(firsts.values(), key=lambda e: e.seq)
    match = {k: last.fields[k] for k in ("node", "group", "txn", "vote")}
    return txn, ("VOTE_CAST", match, client)


class LiveCluster:
    """Six server processes on free local ports, driven through the real CLI entry point."""

    def __init__(self, tmp_path, engine="ha", replication="sync", tick_ms=2):
        import subprocess
        import sys

        from crosskv.config import six_node_config

        self.subprocess, self.python = subprocess, sys.executable
        ports = free_ports(6)
        cfg = six_node_config(0, tick_ms=tick_ms, wal_dir=str(tmp_path / "wal"))
        from dataclasses import replace
        from crosskv.common import EngineMode, ReplicationMode
        nodes = tuple(replace(n, port=p) for n, p in zip(cfg.nodes, ports))
        self.config = replace(cfg, nodes=nodes, engine=EngineMode(engine), replication=ReplicationMode(replication))
        self.path = tmp_path / "cluster.ini"
        self.path.write_text(self.config.render())
        self.log_dir = tmp_path
        self.procs = {}

    def addr(self, node):
        return self.config.node(node).addr

    def start(self, *nodes):
        for n in nodes or [n.id for n in self.config.nodes]:
            log = open(self.log_dir / f"{n}.log", "ab")
            self.procs[n] = self.subprocess.Popen(
                [self.python, "-m", "crosskv", "-v", "serve", "--config", str(self.path), "--node", n],
                stdout=log, stderr=log)
        for n in nodes or list(self.procs):
            self.wait_ready(n)
        return self

    def wait_ready(self, node, timeout=15.0):
        import time

        from crosskv.remote import ConnectFailure, RespConnection
        deadline = time.monotonic() + timeout
        while True:
            try:
                with RespConnection.to(self.addr(node), 2.0) as c:
                    if c.call("PING") == "PONG":
                        return
            except (ConnectFailure, OSError):
                pass
            if self.procs[node].poll() is not None or time.monotonic() > deadline:
                raise RuntimeError(f"{node} did not start: {(self.log_dir / f'{node}.log').read_text()}")
            time.sleep(0.05)

    def connect(self, node="m1"):
        from crosskv.remote import RespConnection
        return RespConnection.to(self.addr(node), 10.0)

    def stop(self, node, kill=False):
        p = self.procs.pop(node)
        p.kill() if kill else p.terminate()
        return p.wait(10)

    def committed(self):
        """Union of every master's committed state, via the admin command."""
        state = {}
        for g in self.config.groups():
            with self.connect(g.master) as c:
                flat = c.call("DEBUG", "COMMITTED")
            state.update(zip(flat[0::2], flat[1::2]))
        return state

    def close(self):
        for n in list(self.procs):
            self.stop(n, kill=True)


# criterion number -> one-line verdict, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}
