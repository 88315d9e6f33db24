"""Offline correctness checks over simulation traces.

Each checker rebuilds what it needs from trace events alone (it never looks
at live node objects), so it also works on traces loaded from text or forged
by tests. A checker returns a :class:`CheckResult`; an empty violation list
means the property held.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .simnet import Trace, TraceEvent


@dataclass(frozen=True)
class Violation:
    check: str
    detail: str
    at: int | None = None

    def __str__(self) -> str:
        where = f" @{self.at}" if self.at is not None else ""
        return f"{self.check}{where}: {self.detail}"


@dataclass
class CheckResult:
    name: str
    violations: list[Violation] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def add(self, detail: str, at: int | None = None) -> None:
        self.violations.append(Violation(self.name, detail, at))

    def __str__(self) -> str:
        if self.ok:
            return f"{self.name}: ok"
        return f"{self.name}: {len(self.violations)} violation(s); first: {self.violations[0]}"


# ------------------------------------------------------------------ indexes


@dataclass
class _Txn:
    txn: object
    client: str
    participants: frozenset[int]
    writes: dict[int, list[tuple[bytes, bytes]]]


class _Index:
    """One pass over a trace, grouping the events the checkers care about."""

    def __init__(self, trace: Trace | Iterable[TraceEvent]):
        events = trace.events if isinstance(trace, Trace) else list(trace)
        self.events = events
        self.config: dict = {}
        self.txns: dict = {}
        self.votes: dict = defaultdict(list)  # (group, txn) -> [(at, node, vote)]
        self.decisions: dict = defaultdict(list)  # txn -> [(at, source, outcome)]
        self.final: dict[str, dict] = {}
        self.end: dict = {}
        self.lost_groups: set[int] = set()
        self.applied: set[tuple] = set()  # (txn, group, outcome)
        for e in events:
            f = e.fields
            k = e.kind
            if k == "RUN":
                self.config = f
            elif k == "TXN_BEGIN":
                ws: dict[int, list] = defaultdict(list)
                for g, key, value in f["writes"]:
                    ws[g].append((key, value))
                self.txns[f["txn"]] = _Txn(f["txn"], f["client"], frozenset(f["participants"]), dict(ws))
            elif k == "VOTE_CAST":
                self.votes[(f["group"], f["txn"])].append((e.at, f["node"], f["vote"]))
            elif k == "CLIENT_DECIDE":
                self.decisions[f["txn"]].append((e.at, f"client {f['client']}", f["outcome"]))
            elif k == "TERM_DECIDE":
                self.decisions[f["txn"]].append((e.at, f"terminator {f['node']}", f["outcome"]))
            elif k == "APPLY":
                self.decisions[f["txn"]].append((e.at, f"apply {f['node']}", f["outcome"]))
                self.applied.add((f["txn"], f["group"], f["outcome"]))
            elif k == "FINAL":
                self.final[f["node"]] = f
            elif k == "END":
                self.end = f
            elif k == "GROUP_RESTORED" and f.get("lost"):
                self.lost_groups.add(f["group"])

    def masters(self) -> dict[int, dict]:
        """Final state of each group's master, for groups whose master is alive."""
        out = {}
        for g, node in enumerate(self.end.get("view", [])):
            if g in self.end.get("unavailable", []):
                continue
            st = self.final.get(node)
            if st is not None and st.get("alive"):
                out[g] = st
        return out

    def fold(self, commits: Iterable, group: int) -> dict:
        kv: dict = {}
        for t in commits:
            rec = self.txns.get(t)
            if rec is None:
                continue
            for key, value in rec.writes.get(group, ()):
                kv[key] = value
        return kv


def _index(trace) -> _Index:
    return trace if isinstance(trace, _Index) else _Index(trace)


# --------------------------------------------------------------- checkers


def check_agreement(trace) -> CheckResult:
    """No two processes ever decide differently for the same transaction."""
    idx = _index(trace)
    res = CheckResult("agreement")
    for txn, ds in idx.decisions.items():
        if _beyond_assumption(idx, txn):
            continue
        outcomes = {o for _, _, o in ds}
        if len(outcomes) > 1:
            res.add(f"txn {txn} decided {sorted(outcomes)} by {[(s, o) for _, s, o in ds]}", ds[0][0])
    for e in idx.events:
        if e.kind == "AGREEMENT_VIOLATION" and not _beyond_assumption(idx, e.fields["txn"]):
            res.add(f"node {e.fields['node']} txn {e.fields['txn']} reported a conflicting decision", e.at)
    for node, st in idx.final.items():
        if not st.get("alive"):
            continue
        for t in set(st["commits"]) & set(st["aborts"]):
            res.add(f"node {node} holds txn {t} both committed and aborted")
    return res


def _beyond_assumption(idx: _Index, txn) -> bool:
    """The txn touched a group that lost every replica, so no guarantee applies."""
    rec = idx.txns.get(txn)
    return rec is not None and bool(rec.participants & idx.lost_groups)


def check_validity(trace) -> CheckResult:
    """COMMIT only after a YES from every participant; fault-free all-YES runs must commit."""
    idx = _index(trace)
    res = CheckResult("validity")
    faulty = any(e.kind in ("CRASH", "DROP", "WAL_FAILURE") for e in idx.events)
    for txn, rec in idx.txns.items():
        if _beyond_assumption(idx, txn):
            continue
        outcomes = {o for _, _, o in idx.decisions.get(txn, ())}
        yes = {g for g in rec.participants
               if any(v == "yes" for _, _, v in idx.votes.get((g, txn), ()))}
        no = any(v == "no" for g in rec.participants for _, _, v in idx.votes.get((g, txn), ()))
        if "commit" in outcomes and (yes != rec.participants or no):
            res.add(f"txn {txn} committed with YES votes only from {sorted(yes)} of {sorted(rec.participants)}")
        if not faulty and yes == rec.participants and not no and outcomes != {"commit"}:
            res.add(f"txn {txn} got YES from every participant in a fault-free run but decided {sorted(outcomes)}")
    return res


def check_stability(trace) -> CheckResult:
    """A cast vote and an applied decision never change, and survive to the final state."""
    idx = _index(trace)
    res = CheckResult("stability")
    for (g, txn), vs in idx.votes.items():
        if g in idx.lost_groups:
            continue  # a group that lost every copy of its state forgets its votes
        if len({v for _, _, v in vs}) > 1:
            res.add(f"group {g} changed its vote on {txn}: {[(n, v) for _, n, v in vs]}", vs[-1][0])
    applied: dict = {}
    for e in idx.events:
        if e.kind == "APPLY":
            key = (e.fields["node"], e.fields["txn"])
            prev = applied.get(key)
            if prev is not None and prev != e.fields["outcome"]:
                res.add(f"node {key[0]} re-applied {key[1]} as {e.fields['outcome']} after {prev}", e.at)
            applied[key] = e.fields["outcome"]
        elif e.kind in ("CRASH", "RESTART", "SNAPSHOT_APPLIED", "RECOVERED"):
            node = e.fields["node"]
            for key in [k for k in applied if k[0] == node]:
                del applied[key]
    if idx.config.get("replication") == "async" and idx.config.get("engine") == "ha":
        return res  # acknowledged-but-unreplicated commits may be lost by design
    for g, st in idx.masters().items():
        if g in idx.lost_groups:
            continue
        commits = set(st["commits"])
        for txn, rec in idx.txns.items():
            if g not in rec.participants:
                continue
            outs = {o for _, _, o in idx.decisions.get(txn, ())}
            if txn not in commits and _applied(idx, txn, g, "commit"):
                res.add(f"group {g} master {st['node']} lost committed txn {txn}")
            if txn in commits and outs == {"abort"}:
                res.add(f"group {g} master {st['node']} holds aborted txn {txn} as committed")
    return res


def _applied(idx: _Index, txn, group: int, outcome: str) -> bool:
    return (txn, group, outcome) in idx.applied


def check_all_or_nothing(trace) -> CheckResult:
    """Each committed txn is installed in every participant group, an aborted one in none."""
    idx = _index(trace)
    res = CheckResult("all-or-nothing")
    masters = idx.masters()
    for txn, rec in idx.txns.items():
        present = {g for g in rec.participants if g in masters and txn in masters[g]["commits"]}
        checked = {g for g in rec.participants if g in masters and g not in idx.lost_groups}
        present &= checked
        if present and present != checked:
            res.add(f"txn {txn} installed in groups {sorted(present)} but not {sorted(checked - present)}")
    for g, st in masters.items():
        if g in idx.lost_groups:
            continue
        kv = idx.fold(st["commits"], g)
        got = dict((k, v) for k, v in st["kv"])
        if got != kv:
            res.add(f"group {g} master {st['node']} state differs from its commit log replay")
    return res


def check_atomicity(trace) -> CheckResult:
    """Agreement, validity, stability and all-or-nothing together."""
    idx = _index(trace)
    res = CheckResult("atomicity")
    for sub in (check_agreement(idx), check_validity(idx), check_stability(idx), check_all_or_nothing(idx)):
        res.violations.extend(sub.violations)
    return res


def check_termination(trace) -> CheckResult:
    """Every transaction with a durable YES vote reaches one outcome at every participant.

    Groups that became unavailable (all replicas down) are outside the failure
    assumption and are reported in ``notes["blocked"]`` rather than as violations.
    """
    idx = _index(trace)
    res = CheckResult("termination")
    masters = idx.masters()
    blocked: list = []
    for g, st in masters.items():
        stuck = []
        for txn in st["in_doubt"]:
            rec = idx.txns.get(txn)
            if rec is not None and not rec.participants <= set(masters):
                blocked.append((txn, g))
            else:
                stuck.append(txn)
        if stuck:
            res.add(f"group {g} master {st['node']} still holds in-doubt txns {[str(t) for t in stuck]}")
    for txn, rec in idx.txns.items():
        voting = any(v == "yes" for g in rec.participants for _, _, v in idx.votes.get((g, txn), ()))
        if not voting or _beyond_assumption(idx, txn):
            continue
        outcomes = {}
        unreachable = False
        for g in rec.participants:
            st = masters.get(g)
            if st is None:
                blocked.append((txn, g))
                unreachable = True
                continue
            if txn in st["commits"]:
                outcomes[g] = "commit"
            elif txn in st["aborts"]:
                outcomes[g] = "abort"
            elif txn in st["in_doubt"]:
                outcomes[g] = None
            # else: the group never staged it, which is only possible when it aborted
        if any(o is None for o in outcomes.values()):
            if unreachable:
                continue
            res.add(f"txn {txn} undecided at groups {sorted(g for g, o in outcomes.items() if o is None)}")
        elif len(set(outcomes.values())) > 1:
            res.add(f"txn {txn} non-uniform outcome {outcomes}")
    res.notes["blocked"] = blocked
    return res


def _node_histories(idx: _Index):
    """Replay node-local committed state through the trace, yielding (event, state-before)."""
    state: dict[str, dict] = defaultdict(dict)
    commits: dict[str, list] = defaultdict(list)
    groups: dict[str, int] = {}
    for g, members in enumerate(idx.config.get("groups", [])):
        for n in members:
            groups[n] = g
    durable = idx.config.get("engine") == "durable"
    for e in idx.events:
        f = e.fields
        yield e, state, commits
        if e.kind == "APPLY" and f["outcome"] == "commit":
            node = f["node"]
            for key, value in f["writes"]:
                state[node][key] = value
            commits[node].append(f["txn"])
        elif e.kind == "SNAPSHOT_APPLIED":
            node = f["node"]
            g = groups.get(node)
            state[node] = idx.fold(f["commits"], g)
            commits[node] = list(f["commits"])
        elif e.kind == "RECOVERED":
            node = f["node"]
            state[node] = {k: v for k, v in f["kv"]}
            commits[node] = list(f["commits"])
        elif e.kind == "CRASH" and not durable:
            state.pop(f["node"], None)
            commits.pop(f["node"], None)


def check_read_committed(trace) -> CheckResult:
    """Every read returns the latest value committed at the serving node, never an intent."""
    idx = _index(trace)
    res = CheckResult("read-committed")
    reads = 0
    for e, state, _ in _node_histories(idx):
        if e.kind != "READ":
            continue
        reads += 1
        f = e.fields
        expected = state.get(f["node"], {}).get(f["key"])
        if f["value"] != expected:
            writers = [t for t, rec in idx.txns.items()
                       if (f["key"], f["value"]) in rec.writes.get(f["group"], ())]
            res.add(f"node {f['node']} read {f['key']!r} = {f['value']!r}, committed value is "
                    f"{expected!r} (written by {writers or 'no txn'})", e.at)
    res.notes["reads"] = reads
    return res


def check_durability(trace) -> CheckResult:
    """A recovered node holds exactly what it had committed before the crash."""
    idx = _index(trace)
    res = CheckResult("durability")
    before: dict[str, tuple[dict, list]] = {}
    recovered = 0
    for e, state, commits in _node_histories(idx):
        if e.kind == "CRASH":
            node = e.fields["node"]
            before[node] = (dict(state.get(node, {})), list(commits.get(node, [])))
        elif e.kind == "RECOVERED":
            recovered += 1
            node = e.fields["node"]
            kv, order = before.get(node, ({}, []))
            got = {k: v for k, v in e.fields["kv"]}
            if got != kv:
                res.add(f"node {node} recovered {got} but had committed {kv}", e.at)
            if list(e.fields["commits"]) != order:
                res.add(f"node {node} recovered commit order {e.fields['commits']} != {order}", e.at)
    res.notes["recovered"] = recovered
    return res


def check_convergence(trace) -> CheckResult:
    """At the end every live member of a group matches its master.

    Also verifies the asynchronous-replication loss bound: a commit that was
    applied by a crashed master but is missing after failover must have been
    replicated past the last sequence the promoted replica acknowledged.
    ``notes["lost"]`` lists those transactions.
    """
    idx = _index(trace)
    res = CheckResult("convergence")
    for g, members in enumerate(idx.config.get("groups", [])):
        master = idx.end.get("view", [None] * (g + 1))[g]
        st = idx.final.get(master)
        if st is None or not st.get("alive") or g in idx.end.get("unavailable", []):
            continue
        for n in members:
            other = idx.final.get(n)
            if n == master or other is None or not other.get("alive") or other.get("role") == "idle":
                continue
            if other["kv"] != st["kv"] or other["commits"] != st["commits"]:
                res.add(f"group {g} member {n} diverges from master {master}")
    lost = []
    acked: dict[tuple[str, str], int] = defaultdict(int)
    sent: dict[tuple[str, object], int] = {}
    applied_at: dict[str, list] = defaultdict(list)
    for e in idx.events:
        f = e.fields
        if e.kind == "REPL_ACKED":
            acked[(f["node"], f["replica"])] = max(acked[(f["node"], f["replica"])], f["seq"])
        elif e.kind == "REPL_SEND" and f["kind"] == "decision":
            sent[(f["node"], f["txn"])] = f["seq"]
        elif e.kind == "APPLY" and f["role"] == "master" and f["outcome"] == "commit":
            applied_at[f["node"]].append((f["group"], f["txn"]))
        elif e.kind == "PROMOTE":
            failed, new, g = f["failed"], f["master"], f["group"]
            if g in idx.lost_groups:
                continue
            final = idx.final.get(idx.end.get("view", [])[g]) if idx.end.get("view") else None
            if final is None or not final.get("alive"):
                continue
            for group, txn in applied_at.get(failed, ()):
                if group != g or txn in final["commits"]:
                    continue
                seq = sent.get((failed, txn))
                upto = acked[(failed, new)]
                lost.append((txn, g, seq, upto))
                if seq is None or seq <= upto:
                    res.add(f"txn {txn} lost on failover of {failed} though {new} acked up to {upto}"
                            f" (decision seq {seq})", e.at)
    res.notes["lost"] = lost
    return res


def check_all(trace) -> list[CheckResult]:
    idx = _index(trace)
    return [check_atomicity(idx), check_termination(idx), check_read_committed(idx),
            check_durability(idx), check_convergence(idx)]
