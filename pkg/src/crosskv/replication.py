"""Master-slave replication inside a node group.

The master numbers every entry it ships (per-origin, gapless). Replicas apply
entries strictly in order and acknowledge cumulatively; a gap or an entry from
an unexpected origin makes the replica ask for a full state copy. In SYNC mode
the master holds back the effect of an entry (a vote, a decision) until every
in-sync replica has acknowledged it, or until the replication timeout drops
the laggards out of the in-sync set.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

from .common import Outcome, ReplicationMode, TxnId, VoteDecision
from .partitioning import NodeGroup
from .storage import StageResult, Store


class SequenceGap(Exception):
    pass


class ReplicaUnreachable(Exception):
    pass


class NoLiveReplica(Exception):
    pass


class ReplicaDiverged(Exception):
    """A replicated entry could not be applied to the replica's state."""


class ReplicateStatus(enum.Enum):
    ACKED = "acked"
    SENT = "sent"
    PENDING = "pending"


@dataclass(frozen=True)
class IntentBody:
    txn: TxnId
    writes: tuple[tuple[bytes, bytes], ...]
    vote: VoteDecision
    participants: frozenset[int]


@dataclass(frozen=True)
class DecisionBody:
    txn: TxnId
    outcome: Outcome


@dataclass(frozen=True)
class ApplyBody:
    key: bytes
    value: bytes


@dataclass(frozen=True)
class ReplicationEntry:
    origin: str
    sequence: int
    body: IntentBody | DecisionBody | ApplyBody

    def to_wire(self) -> dict:
        b = self.body
        if isinstance(b, IntentBody):
            body = {"t": "intent", "txn": b.txn, "writes": [list(w) for w in b.writes],
                    "vote": b.vote, "participants": sorted(b.participants)}
        elif isinstance(b, DecisionBody):
            body = {"t": "decision", "txn": b.txn, "outcome": b.outcome}
        else:
            body = {"t": "apply", "key": b.key, "value": b.value}
        return {"origin": self.origin, "seq": self.sequence, "body": body}

    @classmethod
    def from_wire(cls, d: dict) -> "ReplicationEntry":
        b = d["body"]
        if b["t"] == "intent":
            body = IntentBody(b["txn"], tuple((k, v) for k, v in b["writes"]), b["vote"],
                              frozenset(b["participants"]))
        elif b["t"] == "decision":
            body = DecisionBody(b["txn"], b["outcome"])
        else:
            body = ApplyBody(b["key"], b["value"])
        return cls(d["origin"], d["seq"], body)


@dataclass
class GroupState:
    """What a group member holds and replicates: the store plus cast votes."""

    store: Store
    votes: dict[TxnId, tuple[VoteDecision, frozenset[int]]] = field(default_factory=dict)
    # replica side: where the stream comes from and which entry is next
    origin: str | None = None
    expected_seq: int = 1
    resyncing: bool = False

    def snapshot(self) -> dict:
        snap = self.store.snapshot()
        snap["votes"] = {t: (v, frozenset(p)) for t, (v, p) in self.votes.items()}
        return snap

    def restore(self, snap: dict, origin: str, seq: int) -> None:
        self.store.restore(snap)
        self.votes = {t: (v, frozenset(p)) for t, (v, p) in snap["votes"].items()}
        self.origin = origin
        self.expected_seq = seq + 1
        self.resyncing = False


def apply_replicated(state: GroupState, entry: ReplicationEntry) -> list:
    """Apply one entry on a replica; return ``(txn, outcome, writes)`` for each decision applied.

    Raises SequenceGap when the entry is not the next one expected from the
    current origin; re-delivered old entries are ignored.
    """
    if state.resyncing:
        return []
    if entry.origin != state.origin or entry.sequence > state.expected_seq:
        raise SequenceGap(f"expected {state.origin}#{state.expected_seq}, got {entry.origin}#{entry.sequence}")
    if entry.sequence < state.expected_seq:
        return []
    applied = []
    store = state.store
    body = entry.body
    if isinstance(body, IntentBody):
        if body.vote is VoteDecision.YES:
            for key, value in body.writes:
                if store.stage_write(body.txn, key, value) is StageResult.CONFLICT:
                    raise ReplicaDiverged(f"{body.txn} conflicts on replica")
        else:
            store.discard(body.txn)
        state.votes[body.txn] = (body.vote, body.participants)
    elif isinstance(body, DecisionBody):
        if body.txn in store.staged:
            if body.outcome is Outcome.COMMIT:
                applied.append((body.txn, body.outcome, store.install_commit(body.txn)))
            else:
                store.discard(body.txn)
                applied.append((body.txn, body.outcome, []))
        elif store.decisions.get(body.txn) is None:
            store.record_decision(body.txn, body.outcome)
            applied.append((body.txn, body.outcome, []))
    else:
        store.apply_write(body.key, body.value)
    state.expected_seq += 1
    return applied


@dataclass
class _Pending:
    waiting: set[str]
    action: tuple


class Replicator:
    """Master-side bookkeeping for the replication stream of one group."""

    def __init__(self, origin: str, replicas: Iterable[str], mode: ReplicationMode, start_seq: int = 0):
        self.origin = origin
        self.mode = mode
        self.seq = start_seq
        self.in_sync: set[str] = set(replicas)
        self.syncing: set[str] = set()
        self.pending: dict[int, _Pending] = {}

    def targets(self) -> list[str]:
        return sorted(self.in_sync | self.syncing)

    def replicate(self, body, action: tuple) -> tuple[ReplicationEntry, ReplicateStatus]:
        """Number ``body`` and decide whether its ``action`` must wait for acks."""
        self.seq += 1
        entry = ReplicationEntry(self.origin, self.seq, body)
        if self.mode is ReplicationMode.ASYNC:
            return entry, ReplicateStatus.SENT
        if not self.in_sync:
            return entry, ReplicateStatus.ACKED
        self.pending[self.seq] = _Pending(set(self.in_sync), action)
        return entry, ReplicateStatus.PENDING

    def on_ack(self, replica: str, seq: int) -> list[tuple]:
        """Cumulative ack; returns the actions whose entries are now fully acknowledged."""
        done = []
        for s in sorted(self.pending):
            if s > seq:
                break
            p = self.pending[s]
            p.waiting.discard(replica)
            if not p.waiting:
                done.append(self.pending.pop(s).action)
        return done

    def on_timeout(self, seq: int) -> tuple[tuple, set[str]] | None:
        """Give up on an entry: drop its non-acking replicas from the in-sync set.

        Returns ``(action, dropped)`` or None when the entry already completed.
        Later entries that were only waiting on the dropped replicas complete
        with it and are returned through :meth:`release`.
        """
        p = self.pending.pop(seq, None)
        if p is None:
            return None
        dropped = set(p.waiting)
        self.in_sync -= dropped
        return p.action, dropped

    def release(self) -> list[tuple]:
        """Actions whose remaining waiters all left the in-sync set."""
        done = []
        for s in sorted(self.pending):
            p = self.pending[s]
            p.waiting &= self.in_sync
            if not p.waiting:
                done.append(self.pending.pop(s).action)
        return done

    def begin_resync(self, replica: str) -> int:
        self.in_sync.discard(replica)
        self.syncing.add(replica)
        return self.seq

    def on_snapshot_ack(self, replica: str) -> None:
        if replica in self.syncing:
            self.syncing.discard(replica)
            self.in_sync.add(replica)

    def forget(self, replica: str) -> list[tuple]:
        self.syncing.discard(replica)
        self.in_sync.discard(replica)
        return self.release()


def promote(group: NodeGroup, failed: str, alive: Iterable[str] = None,
            eligible: Iterable[str] | None = None) -> NodeGroup:
    """Replace a crashed master by its first live (and, if given, in-sync) replica.

    The failed node moves to the end of the replica list so it can rejoin as a
    replica after restart.
    """
    if failed != group.master:
        raise ValueError(f"{failed!r} is not the master of this group")
    alive = set(group.replicas) if alive is None else set(alive)
    ok = set(group.replicas) if eligible is None else set(eligible)
    for r in group.replicas:
        if r in alive and r in ok:
            rest = tuple(x for x in group.replicas if x != r) + (failed,)
            return NodeGroup(r, rest)
    raise NoLiveReplica(f"no live replica to replace {failed!r}")
