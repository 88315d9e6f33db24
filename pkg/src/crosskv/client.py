"""Client sessions and the client-side transaction manager.

A :class:`Client` owns one session and coordinates every transaction that
session issues: it routes reads to the owning masters, ships write-sets with
the full participant list (prewrite), turns the returned votes into an outcome
and pushes that outcome until every participant group has acknowledged it.

Isolation is read-committed. ``MGET`` reads each key's committed value at its
owning master independently; it is *not* a snapshot across groups, so two
keys written by one transaction may be observed one before and one after that
transaction's commit. ``EXEC`` reads execute at EXEC time and see the
transaction's own queued writes.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .commands import (ABORTED, OK, PONG, QUEUED, QUEUEABLE, ArityError, Command, NestedMulti,
                       QueueVerbInvalid, ReplyError, render)
from .common import Outcome, TxnId, VoteDecision
from .machine import ClusterView, Effects, Timing
from .partitioning import SlotMap, key_to_slot
from .protocol import IncompleteVotes, Kind, Message, TxnRecord, TxnState, decide


class SessionMode(enum.Enum):
    NORMAL = "normal"
    QUEUING = "queuing"


@dataclass
class Session:
    client: str
    mode: SessionMode = SessionMode.NORMAL
    queue: list[Command] = field(default_factory=list)
    current_txn: TxnId | None = None

    def multi(self):
        if self.mode is SessionMode.QUEUING:
            raise NestedMulti("ERR MULTI calls can not be nested")
        self.mode = SessionMode.QUEUING
        return OK

    def queue_command(self, cmd: Command):
        if self.mode is not SessionMode.QUEUING:
            raise QueueVerbInvalid("ERR not inside MULTI")
        if cmd.verb not in QUEUEABLE:
            raise QueueVerbInvalid(f"ERR {cmd.verb} is not allowed inside MULTI")
        self.queue.append(cmd)
        return QUEUED

    def discard_txn(self):
        if self.mode is not SessionMode.QUEUING:
            raise QueueVerbInvalid("ERR DISCARD without MULTI")
        self.queue.clear()
        self.mode = SessionMode.NORMAL
        return OK

    def take_queue(self) -> list[Command]:
        if self.mode is not SessionMode.QUEUING:
            raise QueueVerbInvalid("ERR EXEC without MULTI")
        queued, self.queue = self.queue, []
        self.mode = SessionMode.NORMAL
        return queued


@dataclass
class _ReadOp:
    req: int
    by_group: dict[int, list[bytes]]
    then: Callable[[dict[bytes, bytes | None], Effects], None]
    values: dict[bytes, bytes | None] = field(default_factory=dict)
    done: set[int] = field(default_factory=set)


@dataclass
class _TxnOp:
    record: TxnRecord
    result: object
    outcome: Outcome | None = None
    acked: set[int] = field(default_factory=set)


class Client:
    def __init__(self, client_id: str, slot_map: SlotMap, view: ClusterView, timing: Timing = Timing(),
                 slots_reply: Callable[[], list] | None = None):
        self.id = client_id
        self.slot_map = slot_map
        self.view = view
        self.timing = timing
        self.session = Session(client_id)
        self.inbox: deque[Command] = deque()
        self.op: _ReadOp | _TxnOp | None = None
        self.current: Command | None = None
        self.counter = 0
        self.req_counter = 0
        self.replies_sent = 0
        # drained by the driver: (command, reply) in completion order
        self.completed: list[tuple[Command, object]] = []
        self._slots_reply = slots_reply

    # ----------------------------------------------------------- driver API

    def submit(self, cmd: Command, ctx: Effects) -> None:
        self.inbox.append(cmd)
        self._pump(ctx)

    def on_view(self, view: ClusterView, ctx: Effects) -> None:
        self.view = view

    def on_message(self, msg: Message, ctx: Effects) -> None:
        op = self.op
        if msg.kind is Kind.READ_REPLY:
            if isinstance(op, _ReadOp) and msg.body["req"] == op.req:
                self._on_read_reply(op, msg, ctx)
        elif isinstance(op, _TxnOp) and msg.txn == op.record.id:
            if msg.kind is Kind.VOTE:
                self._on_vote(op, msg, ctx)
            elif msg.kind is Kind.ACK:
                self._on_ack(op, msg, ctx)
        self._pump(ctx)

    def on_timer(self, key: tuple, ctx: Effects) -> None:
        op = self.op
        kind, ident = key
        if kind == "read" and isinstance(op, _ReadOp) and op.req == ident:
            self._send_reads(op, ctx, only_missing=True)
            ctx.timer(self.timing.retry, key)
        elif kind == "txn" and isinstance(op, _TxnOp) and op.record.id == ident:
            if op.outcome is None:
                self._send_prewrites(op, ctx, only_unknown=True)
            else:
                self._send_decisions(op, ctx)
            ctx.timer(self.timing.retry, key)

    # ------------------------------------------------------------- commands

    def _pump(self, ctx: Effects) -> None:
        while self.op is None and self.inbox:
            self._dispatch(self.inbox.popleft(), ctx)

    def _reply(self, reply, ctx: Effects) -> None:
        self.replies_sent += 1
        ctx.event("REPLY", client=self.id, n=self.replies_sent, cmd=str(self.current), reply=render(reply))
        self.completed.append((self.current, reply))
        self.op = None
        self.current = None

    def _dispatch(self, cmd: Command, ctx: Effects) -> None:
        self.current = cmd
        session = self.session
        try:
            cmd.check_arity()
        except ArityError as exc:
            return self._reply(ReplyError(str(exc)), ctx)
        verb = cmd.verb
        try:
            if verb == "MULTI":
                return self._reply(session.multi(), ctx)
            if verb == "DISCARD":
                return self._reply(session.discard_txn(), ctx)
            if verb == "EXEC":
                return self._exec(session.take_queue(), ctx)
            if session.mode is SessionMode.QUEUING:
                return self._reply(session.queue_command(cmd), ctx)
        except (NestedMulti, QueueVerbInvalid) as exc:
            return self._reply(ReplyError(str(exc)), ctx)
        if verb == "PING":
            return self._reply(cmd.args[0] if cmd.args else PONG, ctx)
        if verb == "CLUSTER":
            return self._reply(self._cluster(cmd), ctx)
        if verb == "GET":
            return self._read(list(cmd.args), lambda vals, c: self._reply(vals[cmd.args[0]], c), ctx)
        if verb == "MGET":
            return self._read(list(cmd.args), lambda vals, c: self._reply([vals[k] for k in cmd.args], c), ctx)
        if verb in ("SET", "MSET"):
            return self._transact(dict(cmd.pairs()), OK, ctx)
        self._reply(ReplyError(f"ERR unknown command '{cmd.verb.lower()}'"), ctx)

    def _cluster(self, cmd: Command):
        sub = cmd.args[0].upper()
        if sub == b"KEYSLOT" and len(cmd.args) == 2:
            return key_to_slot(cmd.args[1], self.slot_map.slot_count)
        if sub == b"SLOTS" and len(cmd.args) == 1:
            if self._slots_reply is not None:
                return self._slots_reply()
            return [[lo, hi] + [[g.encode()] for g in self.view.groups[i].members]
                    for i, (lo, hi) in enumerate(self.slot_map.ranges())]
        return ReplyError("ERR unknown CLUSTER subcommand")

    def _exec(self, queued: list[Command], ctx: Effects) -> None:
        written: set[bytes] = set()
        to_read: list[bytes] = []
        for cmd in queued:
            if cmd.verb in ("GET", "MGET"):
                to_read.extend(k for k in cmd.args if k not in written and k not in to_read)
            else:
                written.update(cmd.keys)

        def finish(values, c):
            overlay: dict[bytes, bytes] = {}
            results = []
            for cmd in queued:
                if cmd.verb == "GET":
                    k = cmd.args[0]
                    results.append(overlay[k] if k in overlay else values[k])
                elif cmd.verb == "MGET":
                    results.append([overlay[k] if k in overlay else values[k] for k in cmd.args])
                else:
                    overlay.update(cmd.pairs())
                    results.append(OK)
            if overlay:
                self._transact(overlay, results, c)
            else:
                self._reply(results, c)

        if to_read:
            self._read(to_read, finish, ctx)
        else:
            finish({}, ctx)

    # ---------------------------------------------------------------- reads

    def _read(self, keys: list[bytes], then, ctx: Effects) -> None:
        self.req_counter += 1
        by_group: dict[int, list[bytes]] = {}
        for k in dict.fromkeys(keys):
            by_group.setdefault(self.slot_map.group_of_key(k), []).append(k)
        op = self.op = _ReadOp(self.req_counter, by_group, then)
        self._send_reads(op, ctx)
        ctx.timer(self.timing.retry, ("read", op.req))

    def _send_reads(self, op: _ReadOp, ctx: Effects, only_missing: bool = False) -> None:
        for g, keys in sorted(op.by_group.items()):
            if only_missing and g in op.done:
                continue
            dst = self.view.master(g)
            if dst is not None:
                ctx.send(Message(Kind.READ, self.id, dst, None, {"req": op.req, "group": g, "keys": keys}))

    def _on_read_reply(self, op: _ReadOp, msg: Message, ctx: Effects) -> None:
        g = msg.body["group"]
        if g in op.done:
            return
        op.done.add(g)
        op.values.update(zip(op.by_group[g], msg.body["values"]))
        if len(op.done) == len(op.by_group):
            op.then(op.values, ctx)

    # --------------------------------------------------------- transactions

    def begin(self) -> TxnId:
        self.counter += 1
        return TxnId.new(self.id, self.counter)

    def _transact(self, writes: dict[bytes, bytes], result, ctx: Effects) -> None:
        txn = self.begin()
        write_sets: dict[int, list[tuple[bytes, bytes]]] = {}
        for k, v in writes.items():
            write_sets.setdefault(self.slot_map.group_of_key(k), []).append((k, v))
        record = TxnRecord(txn, frozenset(write_sets), write_sets)
        self.session.current_txn = txn
        op = self.op = _TxnOp(record, result)
        ctx.event("TXN_BEGIN", client=self.id, txn=txn, participants=sorted(record.participants),
                  writes=[(g, k, v) for g, ws in sorted(write_sets.items()) for k, v in ws])
        self.prewrite(op, ctx)

    def prewrite(self, op: _TxnOp, ctx: Effects) -> None:
        op.record.advance(TxnState.VOTING)
        self._send_prewrites(op, ctx)
        ctx.timer(self.timing.retry, ("txn", op.record.id))

    def _send_prewrites(self, op: _TxnOp, ctx: Effects, only_unknown: bool = False) -> None:
        rec = op.record
        participants = sorted(rec.participants)
        for g in participants:
            if only_unknown and rec.votes[g] is not VoteDecision.UNKNOWN:
                continue
            dst = self.view.master(g)
            if dst is not None:
                ctx.send(Message(Kind.PREWRITE, self.id, dst, rec.id,
                                 {"group": g, "writes": rec.write_sets[g], "participants": participants}))

    def _on_vote(self, op: _TxnOp, msg: Message, ctx: Effects) -> None:
        rec = op.record
        g = msg.body["group"]
        if rec.state is not TxnState.VOTING or rec.votes.get(g) is not VoteDecision.UNKNOWN:
            return
        rec.votes[g] = msg.body["vote"]
        try:
            outcome = decide(rec.votes)
        except IncompleteVotes:
            return
        self.broadcast_decision(op, outcome, ctx)

    def broadcast_decision(self, op: _TxnOp, outcome: Outcome, ctx: Effects) -> None:
        op.outcome = outcome
        op.record.advance(TxnState.COMMITTED if outcome is Outcome.COMMIT else TxnState.ABORTED)
        ctx.event("CLIENT_DECIDE", client=self.id, txn=op.record.id, outcome=outcome.value)
        self._send_decisions(op, ctx)

    def _send_decisions(self, op: _TxnOp, ctx: Effects) -> None:
        for g in sorted(op.record.participants - op.acked):
            dst = self.view.master(g)
            if dst is not None:
                ctx.send(Message(Kind.DECISION, self.id, dst, op.record.id, {"group": g, "outcome": op.outcome}))

    def _on_ack(self, op: _TxnOp, msg: Message, ctx: Effects) -> None:
        if op.outcome is None:
            return
        op.acked.add(msg.body["group"])
        if op.acked >= op.record.participants:
            self.session.current_txn = None
            self._reply(op.result if op.outcome is Outcome.COMMIT else ABORTED, ctx)
