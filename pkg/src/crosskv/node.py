"""Storage-node state machine: participant, replica and terminator in one.

A node is the master, a replica or (in durable mode) an idle spare of its
group. As master it stages prewrites, casts votes once they are durably held
(acknowledged by in-sync replicas, or written to the WAL), applies decisions,
serves committed reads and runs the cooperative termination protocol for any
transaction whose coordinator went quiet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .common import EngineMode, Outcome, ReplicationMode, TxnId, VoteDecision
from .machine import ClusterView, Effects, Timing
from .partitioning import SlotMap
from .protocol import IncompleteVotes, Kind, Message, decide
from .replication import (DecisionBody, GroupState, IntentBody, ReplicaDiverged, ReplicateStatus,
                          ReplicationEntry, Replicator, SequenceGap, apply_replicated)
from .storage import DecisionConflict, StageResult, Store, UnknownTxn, WrongNode
from .wal import WriteAheadLog, replay

MASTER = "master"
REPLICA = "replica"
IDLE = "idle"


@dataclass
class _PendingVote:
    vote: VoteDecision
    participants: frozenset[int]
    writes: tuple
    reply: list[tuple[str, Kind]] = field(default_factory=list)


@dataclass
class _Termination:
    participants: frozenset[int]
    replies: dict[int, VoteDecision]
    outcome: Outcome | None = None
    acked: set[int] = field(default_factory=set)


class Node:
    def __init__(self, node_id: str, slot_map: SlotMap, view: ClusterView,
                 engine: EngineMode = EngineMode.HIGHLY_AVAILABLE,
                 replication: ReplicationMode = ReplicationMode.SYNC,
                 timing: Timing = Timing(), wal: WriteAheadLog | None = None):
        self.id = node_id
        self.slot_map = slot_map
        self.group = slot_map.group_index_of(node_id)
        self.view = view
        self.engine = engine
        self.replication = replication
        self.timing = timing
        group = self.group
        store = Store(lambda k: slot_map.group_of_key(k) == group, engine, wal)
        self.state = GroupState(store)
        self.replicator: Replicator | None = None
        self.pending_votes: dict[TxnId, _PendingVote] = {}
        self.pending_decisions: dict[TxnId, tuple[Outcome, list[str]]] = {}
        self.terms: dict[TxnId, _Termination] = {}
        self.role = IDLE
        self.rejoining = False
        self.recovered = None
        current = view.groups[group]
        if current.master == node_id:
            self.role = MASTER
            if engine is EngineMode.HIGHLY_AVAILABLE:
                self.replicator = Replicator(node_id, current.replicas, replication)
        elif engine is EngineMode.HIGHLY_AVAILABLE:
            self.role = REPLICA
            self.state.origin = current.master

    @classmethod
    def recover(cls, node_id: str, slot_map: SlotMap, view: ClusterView, wal: WriteAheadLog,
                timing: Timing = Timing()) -> "Node":
        """Rebuild a durable-mode node from its log (committed state plus in-doubt intents)."""
        node = cls(node_id, slot_map, view, EngineMode.DURABLE, ReplicationMode.SYNC, timing, wal)
        result = replay(wal.records())
        group = node.group
        node.state.store = Store.from_replay(result, lambda k: slot_map.group_of_key(k) == group,
                                             EngineMode.DURABLE, wal)
        for txn, (participants, _) in result.in_doubt.items():
            node.state.votes[txn] = (VoteDecision.YES, participants)
        node.recovered = result
        return node

    @classmethod
    def rejoin(cls, node_id: str, slot_map: SlotMap, view: ClusterView, engine, replication,
               timing: Timing = Timing()) -> "Node":
        """A highly-available node restarting with empty memory."""
        node = cls(node_id, slot_map, view, engine, replication, timing)
        node.rejoining = True
        if node.role == REPLICA:
            node.state.resyncing = True
        return node

    @property
    def store(self) -> Store:
        return self.state.store

    def start(self, ctx: Effects) -> None:
        """Called once by the driver after construction or restart."""
        if self.role == REPLICA and self.rejoining:
            self._request_resync(ctx)
        if self.role == MASTER:
            if self.rejoining and self.replicator is not None:
                # restarted empty as master: replicas must drop what they hold
                self.rejoining = False
                for r in self.view.groups[self.group].replicas:
                    self._send_snapshot(r, ctx)
            self._arm_in_doubt(ctx)

    # ------------------------------------------------------------------ view

    def on_view(self, view: ClusterView, ctx: Effects) -> None:
        old_master = self.view.groups[self.group].master
        self.view = view
        new_group = view.groups[self.group]
        if self.engine is not EngineMode.HIGHLY_AVAILABLE or new_group.master == old_master:
            return
        if new_group.master == self.id and self.role == REPLICA:
            self.role = MASTER
            self.replicator = Replicator(self.id, (), self.replication)
            ctx.event("PROMOTED", node=self.id, group=self.group,
                      undecided=len(self.store.undecided()))
            for r in new_group.replicas:
                self._send_snapshot(r, ctx)
            self._arm_in_doubt(ctx)
        elif self.role == REPLICA:
            self._request_resync(ctx)

    def _arm_in_doubt(self, ctx: Effects) -> None:
        for txn in self.store.undecided():
            vote = self.state.votes.get(txn)
            if vote is not None and vote[0] is VoteDecision.YES:
                ctx.timer(self.timing.termination, ("term", txn))

    # -------------------------------------------------------------- dispatch

    def on_message(self, msg: Message, ctx: Effects) -> None:
        handler = _HANDLERS.get(msg.kind)
        if handler is not None:
            handler(self, msg, ctx)

    def on_timer(self, key: tuple, ctx: Effects) -> None:
        if key[0] == "term":
            self._on_term_timer(key[1], ctx)
        elif key[0] == "repl":
            self._on_repl_timeout(key[1], ctx)

    def _send(self, ctx: Effects, kind: Kind, dst: str | None, txn: TxnId | None = None, **body) -> None:
        if dst is not None:
            ctx.send(Message(kind, self.id, dst, txn, body))

    # ------------------------------------------------------------- prewrite

    def _on_prewrite(self, msg: Message, ctx: Effects) -> None:
        if self.role != MASTER:
            return
        txn = msg.txn
        pending = self.pending_votes.get(txn)
        if pending is not None:
            pending.reply.append((msg.src, Kind.VOTE))
            return
        participants = frozenset(msg.body["participants"])
        recorded = self.store.decisions.get(txn)
        if recorded is not None:
            vote = VoteDecision.YES if recorded is Outcome.COMMIT else VoteDecision.NO
            self._send(ctx, Kind.VOTE, msg.src, txn, group=self.group, vote=vote)
            return
        if txn in self.state.votes:
            self._release_vote(txn, msg.src, Kind.VOTE, ctx)
            return
        writes = tuple((k, v) for k, v in msg.body["writes"])
        vote = VoteDecision.YES
        for key, value in writes:
            try:
                staged = self.store.stage_write(txn, key, value)
            except WrongNode:
                ctx.event("ROUTING_ERROR", node=self.id, txn=txn, key=key)
                staged = StageResult.CONFLICT
            if staged is StageResult.CONFLICT:
                vote = VoteDecision.NO
                break
        ctx.event("STAGE", node=self.id, txn=txn, keys=[k for k, _ in writes], locked=vote is VoteDecision.YES)
        self._cast(txn, _PendingVote(vote, participants, writes, [(msg.src, Kind.VOTE)]), ctx)

    def _cast(self, txn: TxnId, pv: _PendingVote, ctx: Effects) -> None:
        """Make the vote durable in the group, then release it to whoever asked."""
        if pv.vote is VoteDecision.NO:
            self.store.discard(txn)
        else:
            self.store.log_intent(txn, pv.participants)
        self.pending_votes[txn] = pv
        if self.replicator is not None:
            writes = pv.writes if pv.vote is VoteDecision.YES else ()
            body = IntentBody(txn, writes, pv.vote, pv.participants)
            if self._replicate(body, ("vote", txn), ctx) is ReplicateStatus.PENDING:
                return
        self._finish_vote(txn, ctx)

    def _finish_vote(self, txn: TxnId, ctx: Effects) -> None:
        pv = self.pending_votes.pop(txn)
        self.state.votes[txn] = (pv.vote, pv.participants)
        if not pv.reply:
            ctx.event("VOTE_CAST", node=self.id, group=self.group, txn=txn, vote=pv.vote.value)
        for dst, kind in pv.reply:
            self._release_vote(txn, dst, kind, ctx)
        if pv.vote is VoteDecision.YES and txn not in self.store.decisions:
            ctx.timer(self.timing.termination, ("term", txn))

    def _release_vote(self, txn: TxnId, dst: str, kind: Kind, ctx: Effects) -> None:
        """Send a durably held vote; every release is traced so checkers see what left the group."""
        vote = self.state.votes[txn][0]
        ctx.event("VOTE_CAST", node=self.id, group=self.group, txn=txn, vote=vote.value)
        if kind is Kind.VOTE:
            self._send(ctx, Kind.VOTE, dst, txn, group=self.group, vote=vote)
        else:
            self._send(ctx, Kind.TERM_REPLY, dst, txn, group=self.group, vote=vote, outcome=None)

    # ------------------------------------------------------------- decisions

    def _on_decision(self, msg: Message, ctx: Effects) -> None:
        if self.role != MASTER:
            return
        txn, outcome = msg.txn, msg.body["outcome"]
        if txn in self.pending_votes:
            return  # sender retries once the vote is settled
        pending = self.pending_decisions.get(txn)
        if pending is not None:
            pending[1].append(msg.src)
            return
        recorded = self.store.decisions.get(txn)
        if recorded is outcome:
            self._send(ctx, Kind.ACK, msg.src, txn, group=self.group, outcome=outcome)
            return
        if recorded is not None:
            ctx.event("AGREEMENT_VIOLATION", node=self.id, txn=txn, recorded=recorded.value,
                      received=outcome.value)
            return
        self.pending_decisions[txn] = (outcome, [msg.src])
        if self.replicator is not None:
            if self._replicate(DecisionBody(txn, outcome), ("decision", txn), ctx) is ReplicateStatus.PENDING:
                return
        self._finish_decision(txn, ctx)

    def _finish_decision(self, txn: TxnId, ctx: Effects) -> None:
        outcome, waiters = self.pending_decisions.pop(txn)
        self._apply(txn, outcome, ctx)
        for dst in waiters:
            self._send(ctx, Kind.ACK, dst, txn, group=self.group, outcome=outcome)

    def _apply(self, txn: TxnId, outcome: Outcome, ctx: Effects) -> None:
        store = self.store
        writes: list = []
        try:
            if txn in store.staged:
                if outcome is Outcome.COMMIT:
                    writes = store.install_commit(txn)
                else:
                    store.discard(txn)
            else:
                if outcome is Outcome.COMMIT and txn not in store.decisions:
                    ctx.event("INSTALL_UNKNOWN", node=self.id, txn=txn)
                store.record_decision(txn, outcome)
        except (DecisionConflict, UnknownTxn) as exc:
            ctx.event("AGREEMENT_VIOLATION", node=self.id, txn=txn, detail=str(exc))
            return
        ctx.event("APPLY", node=self.id, group=self.group, txn=txn, outcome=outcome.value,
                  writes=writes, role=self.role)
        term = self.terms.get(txn)
        if term is not None and term.outcome is None:
            del self.terms[txn]

    # ------------------------------------------------------------ termination

    def _on_term_timer(self, txn: TxnId, ctx: Effects) -> None:
        if self.role != MASTER:
            return
        term = self.terms.get(txn)
        if txn in self.store.decisions and (term is None or term.outcome is None):
            return
        if term is None:
            vote = self.state.votes.get(txn)
            if vote is None or vote[0] is not VoteDecision.YES:
                return
            term = self.terms[txn] = _Termination(vote[1], {self.group: VoteDecision.YES})
            ctx.event("TERM_START", node=self.id, group=self.group, txn=txn)
            ctx.event("VOTE_CAST", node=self.id, group=self.group, txn=txn, vote=vote[0].value)
            if term.participants <= set(term.replies):
                # this group is the only participant: its own vote settles it
                self._term_decided(txn, term, decide(term.replies), ctx)
                ctx.timer(self.timing.retry, ("term", txn))
                return
        if term.outcome is None:
            for g in sorted(term.participants - set(term.replies)):
                self._send(ctx, Kind.TERM_QUERY, self.view.master(g), txn, group=g, origin=self.group)
        else:
            self._broadcast(txn, term, ctx)
        ctx.timer(self.timing.retry, ("term", txn))

    def _on_term_query(self, msg: Message, ctx: Effects) -> None:
        if self.role != MASTER:
            return
        txn = msg.txn
        pending = self.pending_votes.get(txn)
        if pending is not None:
            pending.reply.append((msg.src, Kind.TERM_REPLY))
            return
        recorded = self.store.decisions.get(txn)
        if recorded is not None and txn not in self.pending_decisions:
            self._send(ctx, Kind.TERM_REPLY, msg.src, txn, group=self.group, vote=None, outcome=recorded)
            return
        if txn in self.state.votes:
            self._release_vote(txn, msg.src, Kind.TERM_REPLY, ctx)
            return
        if txn in self.store.staged:
            return  # staging by a prewrite is atomic; nothing partial to fence
        # never saw a prewrite: fence it with a NO so a late one is refused
        ctx.event("FENCE", node=self.id, group=self.group, txn=txn)
        self._cast(txn, _PendingVote(VoteDecision.NO, frozenset(), (), [(msg.src, Kind.TERM_REPLY)]), ctx)

    def _on_term_reply(self, msg: Message, ctx: Effects) -> None:
        txn = msg.txn
        term = self.terms.get(txn)
        if term is None or term.outcome is not None:
            return
        outcome = msg.body.get("outcome")
        if outcome is None:
            term.replies[msg.body["group"]] = msg.body["vote"]
            votes = {g: term.replies.get(g, VoteDecision.UNKNOWN) for g in term.participants}
            try:
                outcome = decide(votes)
            except IncompleteVotes:
                return
        self._term_decided(txn, term, outcome, ctx)

    def _term_decided(self, txn: TxnId, term: _Termination, outcome: Outcome, ctx: Effects) -> None:
        term.outcome = outcome
        ctx.event("TERM_DECIDE", node=self.id, group=self.group, txn=txn, outcome=outcome.value)
        self._broadcast(txn, term, ctx)

    def _broadcast(self, txn: TxnId, term: _Termination, ctx: Effects) -> None:
        for g in sorted(term.participants - term.acked):
            self._send(ctx, Kind.DECISION, self.view.master(g), txn, group=g, outcome=term.outcome)

    def _on_ack(self, msg: Message, ctx: Effects) -> None:
        term = self.terms.get(msg.txn)
        if term is None or term.outcome is None:
            return
        term.acked.add(msg.body["group"])
        if term.acked >= term.participants:
            del self.terms[msg.txn]
            ctx.event("TERM_DONE", node=self.id, txn=msg.txn)

    # ------------------------------------------------------------------ reads

    def _on_read(self, msg: Message, ctx: Effects) -> None:
        if self.role != MASTER:
            return
        values = []
        for key in msg.body["keys"]:
            value = self.store.get_committed(key)
            ctx.event("READ", node=self.id, group=self.group, key=key, value=value)
            values.append(value)
        self._send(ctx, Kind.READ_REPLY, msg.src, None, req=msg.body["req"], group=self.group, values=values)

    # ------------------------------------------------------------ replication

    def _replicate(self, body, action: tuple, ctx: Effects) -> ReplicateStatus:
        entry, status = self.replicator.replicate(body, action)
        for r in self.replicator.targets():
            self._send(ctx, Kind.REPL, r, None, entry=entry)
        ctx.event("REPL_SEND", node=self.id, seq=entry.sequence, txn=body.txn,
                  kind=type(body).__name__[:-4].lower(), targets=self.replicator.targets())
        if status is ReplicateStatus.PENDING:
            ctx.timer(self.timing.repl_timeout, ("repl", entry.sequence))
        return status

    def _complete(self, actions: list[tuple], ctx: Effects) -> None:
        for kind, txn in actions:
            if kind == "vote" and txn in self.pending_votes:
                self._finish_vote(txn, ctx)
            elif kind == "decision" and txn in self.pending_decisions:
                self._finish_decision(txn, ctx)

    def _on_repl(self, msg: Message, ctx: Effects) -> None:
        if self.role != REPLICA:
            return
        entry: ReplicationEntry = msg.body["entry"]
        try:
            applied = apply_replicated(self.state, entry)
        except (SequenceGap, ReplicaDiverged) as exc:
            if not self.state.resyncing:
                ctx.event("REPL_GAP", node=self.id, detail=str(exc))
                self._request_resync(ctx)
            return
        if self.state.resyncing:
            return
        for txn, outcome, writes in applied:
            ctx.event("APPLY", node=self.id, group=self.group, txn=txn, outcome=outcome.value,
                      writes=writes, role=REPLICA)
        self._send(ctx, Kind.REPL_ACK, msg.src, None, seq=self.state.expected_seq - 1)

    def _on_repl_ack(self, msg: Message, ctx: Effects) -> None:
        if self.replicator is None:
            return
        seq = msg.body["seq"]
        ctx.event("REPL_ACKED", node=self.id, replica=msg.src, seq=seq)
        self._complete(self.replicator.on_ack(msg.src, seq), ctx)

    def _on_repl_timeout(self, seq: int, ctx: Effects) -> None:
        if self.replicator is None:
            return
        res = self.replicator.on_timeout(seq)
        if res is None:
            return
        (kind, txn), dropped = res
        ctx.event("REPL_TIMEOUT", node=self.id, seq=seq, txn=txn, dropped=sorted(dropped))
        for r in sorted(dropped):
            self._send_snapshot(r, ctx)
        if kind == "vote" and txn in self.pending_votes:
            pv = self.pending_votes[txn]
            if pv.vote is VoteDecision.YES:
                # ReplicaUnreachable: the intent is not durably held, vote NO instead
                del self.pending_votes[txn]
                self._cast(txn, _PendingVote(VoteDecision.NO, pv.participants, (), pv.reply), ctx)
            else:
                self._finish_vote(txn, ctx)
        elif kind == "decision" and txn in self.pending_decisions:
            self._finish_decision(txn, ctx)
        self._complete(self.replicator.release(), ctx)

    def _request_resync(self, ctx: Effects) -> None:
        self.state.resyncing = True
        self._send(ctx, Kind.RESYNC_REQ, self.view.master(self.group))

    def _send_snapshot(self, replica: str, ctx: Effects) -> None:
        seq = self.replicator.begin_resync(replica)
        state = self.state.snapshot()
        # entries still waiting for acks are part of the stream up to ``seq``
        for txn, pv in self.pending_votes.items():
            state["votes"][txn] = (pv.vote, pv.participants)
        state["decided"] = {txn: outcome for txn, (outcome, _) in self.pending_decisions.items()}
        self._send(ctx, Kind.SNAPSHOT, replica, None, seq=seq, state=state)

    def _on_resync_req(self, msg: Message, ctx: Effects) -> None:
        if self.replicator is None or msg.src not in self.view.groups[self.group].replicas:
            return
        ctx.event("RESYNC", node=self.id, replica=msg.src, seq=self.replicator.seq)
        self._send_snapshot(msg.src, ctx)
        self._complete(self.replicator.release(), ctx)

    def _on_snapshot(self, msg: Message, ctx: Effects) -> None:
        if self.role != REPLICA or msg.src != self.view.master(self.group):
            return
        state = msg.body["state"]
        self.state.restore(state, msg.src, msg.body["seq"])
        store = self.store
        for txn, outcome in state.get("decided", {}).items():
            if txn in store.staged and outcome is Outcome.COMMIT:
                store.install_commit(txn)
            elif txn in store.staged:
                store.discard(txn)
            else:
                store.record_decision(txn, outcome)
        self.rejoining = False
        ctx.event("SNAPSHOT_APPLIED", node=self.id, src=msg.src, seq=msg.body["seq"],
                  commits=list(self.store.commit_log))
        self._send(ctx, Kind.SNAPSHOT_ACK, msg.src, None, seq=msg.body["seq"])

    def _on_snapshot_ack(self, msg: Message, ctx: Effects) -> None:
        if self.replicator is not None:
            self.replicator.on_snapshot_ack(msg.src)

    # ------------------------------------------------------------- inspection

    def describe(self) -> dict:
        store = self.store
        return {
            "role": self.role,
            "committed": store.committed_items(),
            "commit_log": list(store.commit_log),
            "decisions": dict(store.decisions),
            "in_doubt": store.undecided(),
            "in_sync": sorted(self.replicator.in_sync) if self.replicator else [],
        }


_HANDLERS = {
    Kind.PREWRITE: Node._on_prewrite,
    Kind.DECISION: Node._on_decision,
    Kind.TERM_QUERY: Node._on_term_query,
    Kind.TERM_REPLY: Node._on_term_reply,
    Kind.ACK: Node._on_ack,
    Kind.READ: Node._on_read,
    Kind.REPL: Node._on_repl,
    Kind.REPL_ACK: Node._on_repl_ack,
    Kind.RESYNC_REQ: Node._on_resync_req,
    Kind.SNAPSHOT: Node._on_snapshot,
    Kind.SNAPSHOT_ACK: Node._on_snapshot_ack,
}
