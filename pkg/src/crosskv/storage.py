"""Per-node key-value store with write-on-commit staging.

Writes are staged as intents under a per-key no-wait lock and only become
visible through :meth:`Store.install_commit`. Reads see committed values only.
In durable mode every state change that a vote or a decision depends on is
appended to the write-ahead log before it takes effect.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

from .common import EngineMode, Outcome, TxnId
from .wal import ReplayResult, WalKind, WriteAheadLog


class StageResult(enum.Enum):
    STAGED = "staged"
    CONFLICT = "conflict"


class WrongNode(Exception):
    """A key was routed to a node whose group does not own its slot."""


class UnknownTxn(Exception):
    pass


class DecisionConflict(Exception):
    """An outcome was applied that contradicts one already recorded."""


@dataclass(slots=True)
class VersionedCell:
    committed: bytes | None = None
    intents: dict[TxnId, bytes] = field(default_factory=dict)
    lock_holder: TxnId | None = None


class Store:
    def __init__(self, owns: Callable[[bytes], bool] | None = None,
                 mode: EngineMode = EngineMode.HIGHLY_AVAILABLE,
                 wal: WriteAheadLog | None = None):
        if mode is EngineMode.DURABLE and wal is None:
            raise ValueError("durable mode needs a write-ahead log")
        self.owns = owns
        self.mode = mode
        self.wal = wal if mode is EngineMode.DURABLE else None
        self.cells: dict[bytes, VersionedCell] = {}
        self.staged: dict[TxnId, dict[bytes, bytes]] = {}
        self.decisions: dict[TxnId, Outcome] = {}
        self.commit_log: list[TxnId] = []

    # reads

    def get_committed(self, key: bytes) -> bytes | None:
        cell = self.cells.get(key)
        return None if cell is None else cell.committed

    def committed_items(self) -> dict[bytes, bytes]:
        return {k: c.committed for k, c in self.cells.items() if c.committed is not None}

    def is_tombstoned(self, txn: TxnId) -> bool:
        return self.decisions.get(txn) is Outcome.ABORT

    # write-on-commit

    def stage_write(self, txn: TxnId, key: bytes, value: bytes) -> StageResult:
        if self.owns is not None and not self.owns(key):
            raise WrongNode(key)
        if txn in self.decisions:
            return StageResult.CONFLICT
        cell = self.cells.get(key)
        if cell is None:
            cell = self.cells[key] = VersionedCell()
        elif cell.lock_holder is not None and cell.lock_holder != txn:
            return StageResult.CONFLICT
        cell.lock_holder = txn
        cell.intents[txn] = value
        self.staged.setdefault(txn, {})[key] = value
        return StageResult.STAGED

    def log_intent(self, txn: TxnId, participants) -> None:
        """Durably record the staged write-set; a YES vote may follow."""
        if self.wal is not None:
            self.wal.append(WalKind.INTENT, txn, list(self.staged.get(txn, {}).items()), participants)

    def install_commit(self, txn: TxnId) -> list[tuple[bytes, bytes]]:
        """Publish every staged write of ``txn`` at once; return what was installed."""
        recorded = self.decisions.get(txn)
        if recorded is Outcome.COMMIT:
            return []
        if recorded is Outcome.ABORT:
            raise DecisionConflict(f"commit of {txn} after it was aborted here")
        if txn not in self.staged:
            raise UnknownTxn(str(txn))
        if self.wal is not None:
            self.wal.append(WalKind.COMMIT, txn)
        writes = self.staged.pop(txn)
        for key, value in writes.items():
            cell = self.cells[key]
            cell.committed = value
            del cell.intents[txn]
            cell.lock_holder = None
        self.decisions[txn] = Outcome.COMMIT
        self.commit_log.append(txn)
        return list(writes.items())

    def discard(self, txn: TxnId) -> None:
        """Drop ``txn``'s intents and tombstone it so later prewrites are refused."""
        recorded = self.decisions.get(txn)
        if recorded is Outcome.COMMIT:
            raise DecisionConflict(f"abort of {txn} after it committed here")
        if recorded is Outcome.ABORT:
            return
        if self.wal is not None:
            self.wal.append(WalKind.ABORT, txn)
        self._drop_intents(txn)
        self.decisions[txn] = Outcome.ABORT

    def record_decision(self, txn: TxnId, outcome: Outcome) -> None:
        """Remember an outcome for a transaction with nothing staged here."""
        if txn in self.staged:
            raise ValueError(f"{txn} has staged writes; use install_commit or discard")
        recorded = self.decisions.get(txn)
        if recorded is not None and recorded is not outcome:
            raise DecisionConflict(f"{txn}: {recorded.value} already recorded")
        if recorded is None:
            if self.wal is not None:
                self.wal.append(WalKind.COMMIT if outcome is Outcome.COMMIT else WalKind.ABORT, txn)
            self.decisions[txn] = outcome
            if outcome is Outcome.COMMIT:
                self.commit_log.append(txn)

    def apply_write(self, key: bytes, value: bytes) -> None:
        """Direct committed write, used only by replica catch-up entries."""
        cell = self.cells.get(key)
        if cell is None:
            cell = self.cells[key] = VersionedCell()
        cell.committed = value

    def _drop_intents(self, txn: TxnId) -> None:
        for key in self.staged.pop(txn, {}):
            cell = self.cells[key]
            cell.intents.pop(txn, None)
            if cell.lock_holder == txn:
                cell.lock_holder = None
            if cell.committed is None and not cell.intents:
                del self.cells[key]

    def undecided(self) -> list[TxnId]:
        return [t for t in self.staged if t not in self.decisions]

    # whole-state copies for replica resync

    def snapshot(self) -> dict:
        return {
            "committed": self.committed_items(),
            "staged": {t: dict(w) for t, w in self.staged.items()},
            "decisions": dict(self.decisions),
            "commit_log": list(self.commit_log),
        }

    def restore(self, snap: dict) -> None:
        self.cells = {}
        for key, value in snap["committed"].items():
            self.cells[key] = VersionedCell(committed=value)
        self.staged = {}
        for txn, writes in snap["staged"].items():
            for key, value in writes.items():
                cell = self.cells.setdefault(key, VersionedCell())
                cell.intents[txn] = value
                cell.lock_holder = txn
            self.staged[txn] = dict(writes)
        self.decisions = dict(snap["decisions"])
        self.commit_log = list(snap["commit_log"])

    @classmethod
    def from_replay(cls, result: ReplayResult, owns=None, mode=EngineMode.DURABLE, wal=None) -> "Store":
        store = cls(owns=owns, mode=mode, wal=wal)
        store.restore({
            "committed": result.committed,
            "staged": {t: dict(writes) for t, (_, writes) in result.in_doubt.items()},
            "decisions": result.decisions,
            "commit_log": result.commit_order,
        })
        return store
