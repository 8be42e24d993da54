"""Online safety checks run by the simulator after every state change."""

from __future__ import annotations

from typing import Mapping, Optional

from ..core import ChainConfig, ChainError, Digest, Superblock
from ..execution import ContractHandler, WorldState, execute_in_place, lazy_validate
from ..state_node import LogRecord, read_value


class SafetyViolation(ChainError):
    def __init__(self, what: str, trace: Optional[list] = None):
        super().__init__(what)
        self.what = what
        self.trace = trace or []


class SafetyMonitor:
    """Checks superblock agreement, log prefix safety, validity and reads.

    The first correct node to persist the record at position p fixes the
    canonical record p; every other correct node must persist the same bytes.
    A shadow state replays the canonical records, checking that every
    persisted transaction was lazily valid where it executed.
    """

    def __init__(self, cfg: ChainConfig, genesis: WorldState,
                 contracts: Optional[Mapping[str, ContractHandler]] = None,
                 keep_snapshots: bool = False):
        self.cfg = cfg
        self.contracts = dict(contracts or {})
        self.superblocks: dict[int, Digest] = {}
        self.canonical: list[bytes] = []
        self.positions: dict[int, int] = {}
        self.shadow = genesis.copy()
        self.keep_snapshots = keep_snapshots
        self.snapshots: dict[int, WorldState] = {0: genesis.copy()} if keep_snapshots else {}
        self.height_digests: dict[int, Digest] = {0: genesis.state_digest}
        self.checks = 0

    def on_superblock(self, node: int, sb: Superblock) -> None:
        self.checks += 1
        d = sb.digest
        prev = self.superblocks.setdefault(sb.index, d)
        if prev != d:
            raise SafetyViolation(f"superblock agreement: node {node} decided a different superblock at index {sb.index}")

    def on_record(self, node: int, rec: LogRecord) -> None:
        self.checks += 1
        pos = self.positions.get(node, 0)
        raw = rec.encode()
        if pos < len(self.canonical):
            if self.canonical[pos] != raw:
                raise SafetyViolation(f"prefix safety: node {node} log diverges at record {pos} (index {rec.index})")
        else:
            self.canonical.append(raw)
            self._shadow_apply(rec)
        self.positions[node] = pos + 1

    def _shadow_apply(self, rec: LogRecord) -> None:
        for tx in rec.transactions:
            if not lazy_validate(tx, self.shadow, self.cfg).accepted:
                raise SafetyViolation(f"validity: persisted transaction {tx.key} was not lazily valid")
            execute_in_place(tx, self.shadow, self.cfg, contracts=self.contracts)
        if rec.closes:
            self.shadow.bump_height()
            h = self.shadow.height
            self.height_digests[h] = self.shadow.state_digest
            if self.keep_snapshots:
                self.snapshots[h] = self.shadow.copy()

    def on_commit(self, node: int, state: WorldState) -> None:
        """A correct node finished a superblock: its state must match the shadow's."""
        self.checks += 1
        expect = self.height_digests.get(state.height)
        if expect is not None and expect != state.state_digest:
            raise SafetyViolation(f"state divergence: node {node} at height {state.height}")

    def on_read(self, key, value) -> None:
        """A light-client read returned ``value``; some committed snapshot must hold it."""
        self.checks += 1
        if not self.keep_snapshots:
            return
        if not any(read_value(s, key) == value for s in self.snapshots.values()):
            raise SafetyViolation(f"light client: {key!r} -> {value!r} is in no committed snapshot")
