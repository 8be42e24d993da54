"""Transaction pool, proposal building, the commit pipeline and quorum reads."""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Optional, Sequence, Union

from .core import (
    DEFAULT_SCHEME,
    Block,
    ChainConfig,
    ChainError,
    ContractViolation,
    DecodeError,
    Digest,
    SignatureScheme,
    Superblock,
    Transaction,
    _Reader,
    canonical_decode,
    sort_transactions,
)
from .execution import (
    ContractHandler,
    ExecutionOutcome,
    ValidationCounters,
    ValidationVerdict,
    WorldState,
    eager_validate,
    execute_in_place,
    lazy_validate,
)

log = logging.getLogger(__name__)

OVERLOAD = "Overload"
DUPLICATE = "Duplicate"

PER_BLOCK = "per_block"
WHOLE_SUPERBLOCK = "whole_superblock"


class NoQuorum(ChainError):
    """No f+1 matching responses among the queried nodes."""


class SimulatedCrash(ChainError):
    """Raised by the commit pipeline when a crash point is injected."""


# -- pool --------------------------------------------------------------------


class TxPool:
    """Eagerly validated transactions keyed by (sender, nonce), in arrival order."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.pending: dict[tuple[str, int], Transaction] = {}
        self.drop_count: Counter = Counter()

    def __len__(self) -> int:
        return len(self.pending)

    def __contains__(self, key) -> bool:
        return key in self.pending

    def add(self, tx: Transaction) -> Optional[str]:
        """Insert ``tx``; returns the drop reason, or None when pooled."""
        if tx.key in self.pending:
            self.drop_count[DUPLICATE] += 1
            return DUPLICATE
        if len(self.pending) >= self.capacity:
            self.drop_count[OVERLOAD] += 1
            return OVERLOAD
        self.pending[tx.key] = tx
        return None

    def take(self, count: int) -> tuple[Transaction, ...]:
        """Remove ``count`` entries, oldest first, sorted by (sender, nonce).

        Within one sender the lowest nonces go first even if a higher nonce
        arrived earlier, so a block never skips over a pooled nonce.
        """
        if count <= 0 or not self.pending:
            return ()
        per_sender: Counter = Counter()
        for i, key in enumerate(self.pending):
            if i >= count:
                break
            per_sender[key[0]] += 1
        chosen = []
        for sender in sorted(per_sender):
            nonces = sorted(k[1] for k in self.pending if k[0] == sender)
            chosen += [(sender, nonce) for nonce in nonces[: per_sender[sender]]]
        return sort_transactions([self.pending.pop(k) for k in chosen])

    def evict_stale(self, state: WorldState) -> int:
        """Drop entries whose nonce was consumed by a committed transaction."""
        stale = [k for k in self.pending if k[1] < state.nonce(k[0])]
        for k in stale:
            del self.pending[k]
        return len(stale)


# -- persisted log -----------------------------------------------------------


@dataclass(frozen=True)
class LogRecord:
    """One persisted unit: a single block, or a whole superblock.

    ``closes`` marks the record that completes its superblock; the committed
    height only advances there.
    """

    index: int
    slots: tuple[int, ...]
    block_digests: tuple[Digest, ...]
    timestamps: tuple[int, ...]
    transactions: tuple[Transaction, ...]
    closes: bool

    def encode(self) -> bytes:
        out = [struct.pack(">QB", self.index, self.closes), struct.pack(">I", len(self.slots))]
        for slot, d, ts in zip(self.slots, self.block_digests, self.timestamps):
            out.append(struct.pack(">IQ", slot, ts) + d)
        out.append(struct.pack(">I", len(self.transactions)))
        for tx in self.transactions:
            raw = tx.encoded
            out.append(struct.pack(">I", len(raw)) + raw)
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes) -> "LogRecord":
        r = _Reader(data)
        index, closes = r.u64(), r.u8()
        if closes > 1:
            raise DecodeError("bad closes flag")
        slots, digests, stamps = [], [], []
        for _ in range(r.u32()):
            slots.append(r.u32())
            stamps.append(r.u64())
            digests.append(r.take(32))
        txs = []
        for _ in range(r.u32()):
            tx = canonical_decode(r.blob())
            if not isinstance(tx, Transaction):
                raise DecodeError("log record holds a non-transaction")
            txs.append(tx)
        r.end()
        return cls(index, tuple(slots), tuple(digests), tuple(stamps), tuple(txs), bool(closes))

    @property
    def keys(self) -> list[tuple[int, int]]:
        return [(self.index, s) for s in self.slots]


class PersistedLog:
    """Append-only record list, optionally mirrored to a length-prefixed file."""

    def __init__(self, mode: str = PER_BLOCK, path: Union[str, Path, None] = None):
        if mode not in (PER_BLOCK, WHOLE_SUPERBLOCK):
            raise ValueError(f"unknown persistence mode {mode!r}")
        self.mode = mode
        self.records: list[LogRecord] = []
        self.path = Path(path) if path is not None else None
        self.persisted: set[tuple[int, int]] = set()
        self.closed_indices: set[int] = set()

    def append(self, rec: LogRecord) -> None:
        if self.records:
            last = self.records[-1]
            if rec.index < last.index or (rec.index == last.index and last.closes):
                raise ContractViolation(f"record for index {rec.index} after closed index {last.index}")
            if rec.index == last.index and rec.slots and last.slots and rec.slots[0] <= last.slots[-1]:
                raise ContractViolation(f"slot {rec.slots[0]} persisted after slot {last.slots[-1]}")
        self.records.append(rec)
        self.persisted.update(rec.keys)
        if rec.closes:
            self.closed_indices.add(rec.index)
        if self.path is not None:
            raw = rec.encode()
            with self.path.open("ab") as fh:
                fh.write(struct.pack(">I", len(raw)) + raw)

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, path: Union[str, Path], mode: str = PER_BLOCK) -> "PersistedLog":
        data = Path(path).read_bytes()
        out = cls(mode)
        r = _Reader(data)
        while r.pos < len(data):
            out.append(LogRecord.decode(r.blob()))
        out.path = Path(path)
        return out


# -- state node --------------------------------------------------------------


@dataclass(frozen=True)
class ReadResponse:
    height: int
    state_digest: Digest
    value: Hashable
    responder: int


@dataclass
class CommitResult:
    index: int
    outcomes: list[ExecutionOutcome]
    rejected: list[tuple[Transaction, ValidationVerdict]]
    records: list[LogRecord]


class StateNode:
    """The execution side of a node.

    ``commit_superblock`` processes one block of the superblock at a time:
    lazy validation, sealing (parent digest, timestamp, digest), execution
    and, in per-block mode, persistence before the next block starts.
    """

    def __init__(
        self,
        node_id: int,
        cfg: ChainConfig,
        genesis: WorldState,
        scheme: SignatureScheme = DEFAULT_SCHEME,
        contracts: Optional[Mapping[str, ContractHandler]] = None,
        mode: str = PER_BLOCK,
        log_path: Union[str, Path, None] = None,
    ):
        self.node_id = node_id
        self.cfg = cfg
        self.genesis = genesis.copy()
        self.state = genesis.copy()
        self.scheme = scheme
        self.contracts = dict(contracts or {})
        self.pool = TxPool(cfg.pool_capacity)
        self.counters = ValidationCounters()
        self.log = PersistedLog(mode, log_path)
        self.last_digest: Optional[Digest] = None
        self.last_timestamp = 0
        self.committed_index = 0
        self.sealed_blocks: list[tuple[int, Block]] = []
        self.lazy_rejections: Counter = Counter()

    @property
    def mode(self) -> str:
        return self.log.mode

    # -- intake ------------------------------------------------------------

    def submit_transaction(self, tx: Transaction) -> Optional[str]:
        """Eagerly validate and pool ``tx``; returns the drop reason or None.

        Accepted transactions are never forwarded to other state nodes.
        """
        verdict = eager_validate(tx, self.state, self.cfg, self.scheme, self.counters)
        if not verdict.accepted:
            self.pool.drop_count[verdict.reason.value] += 1
            return verdict.reason.value
        return self.pool.add(tx)

    def build_proposal(self, timestamp: int = 0, force: bool = False) -> Optional[Block]:
        """Cut a block once the pool reaches the threshold (or any size if forced)."""
        size = len(self.pool)
        if size == 0 or (size < self.cfg.proposal_threshold and not force):
            return None
        txs = self.pool.take(min(size, self.cfg.proposal_threshold))
        return Block(self.node_id, txs, timestamp)

    # -- commit pipeline ---------------------------------------------------

    def commit_superblock(self, sb: Superblock, crash_after: Optional[int] = None) -> CommitResult:
        """Commit ``sb``; ``crash_after`` raises SimulatedCrash after that many blocks."""
        if sb.index != self.committed_index + 1:
            raise ContractViolation(f"superblock {sb.index} out of order (at {self.committed_index})")
        result = CommitResult(sb.index, [], [], [])
        whole: list[tuple[Block, list[Transaction]]] = []
        for pos, block in enumerate(sb.blocks):
            if crash_after is not None and pos >= crash_after:
                raise SimulatedCrash(f"crash before block {pos} of superblock {sb.index}")
            if (sb.index, block.proposer) in self.log.persisted:
                continue  # replayed from the log after a crash
            sealed, valid = self._process_block(block, result)
            if self.mode == PER_BLOCK:
                last = pos == len(sb.blocks) - 1
                self._persist(sb.index, [(sealed, valid)], closes=last, result=result)
            else:
                whole.append((sealed, valid))
        if self.mode == WHOLE_SUPERBLOCK or not sb.blocks:
            self._persist(sb.index, whole, closes=True, result=result)
        self._close_index(sb.index)
        self.pool.evict_stale(self.state)
        return result

    def _process_block(self, block: Block, result: CommitResult) -> tuple[Block, list[Transaction]]:
        timestamp = max(self.last_timestamp, block.timestamp)
        if not timestamp_acceptable(self.last_timestamp, timestamp):
            raise ContractViolation("timestamp went backwards")
        sealed = block.sealed(self.last_digest, timestamp)
        self.last_digest = sealed.digest
        self.last_timestamp = timestamp
        self.sealed_blocks.append((result.index, sealed))
        valid = []
        for tx in block.transactions:
            verdict = lazy_validate(tx, self.state, self.cfg, self.counters)
            if not verdict.accepted:
                self.lazy_rejections[verdict.reason.value] += 1
                result.rejected.append((tx, verdict))
                continue
            valid.append(tx)
            result.outcomes.append(execute_in_place(tx, self.state, self.cfg, self.scheme, self.contracts))
        return sealed, valid

    def _persist(self, index: int, items, closes: bool, result: CommitResult) -> None:
        rec = LogRecord(
            index,
            tuple(b.proposer for b, _ in items),
            tuple(b.digest for b, _ in items),
            tuple(b.timestamp for b, _ in items),
            tuple(tx for _, txs in items for tx in txs),
            closes,
        )
        self.log.append(rec)
        result.records.append(rec)

    def _close_index(self, index: int) -> None:
        if index not in self.log.closed_indices:
            # Every block of this superblock was already on disk before a crash.
            self.log.append(LogRecord(index, (), (), (), (), True))
        self.state.bump_height()
        self.committed_index = index

    # -- recovery ----------------------------------------------------------

    @classmethod
    def recover(
        cls,
        node_id: int,
        cfg: ChainConfig,
        genesis: WorldState,
        log: PersistedLog,
        scheme: SignatureScheme = DEFAULT_SCHEME,
        contracts: Optional[Mapping[str, ContractHandler]] = None,
    ) -> "StateNode":
        """Rebuild a node by re-executing its persisted records from genesis."""
        node = cls(node_id, cfg, genesis, scheme, contracts, log.mode)
        node.log = log
        for rec in log.records:
            for tx in rec.transactions:
                execute_in_place(tx, node.state, cfg, scheme, node.contracts)
            if rec.block_digests:
                node.last_digest = rec.block_digests[-1]
                node.last_timestamp = rec.timestamps[-1]
            if rec.closes:
                node.state.bump_height()
                node.committed_index = rec.index
        return node

    # -- reads -------------------------------------------------------------

    def read(self, key) -> ReadResponse:
        return ReadResponse(self.state.height, self.state.state_digest, read_value(self.state, key), self.node_id)


def timestamp_acceptable(parent: int, child: int) -> bool:
    """Relaxed header check: equal consecutive timestamps are fine."""
    return child >= parent


def read_value(state: WorldState, key) -> Hashable:
    """Account keys return (balance, nonce); (account, nonce) keys return a payload."""
    if isinstance(key, str):
        a = state.account(key)
        return (a.balance, a.nonce)
    who, nonce = key
    return state.payloads.get((who, nonce))


def replay_log(records: Iterable[LogRecord], genesis: WorldState, cfg: ChainConfig,
               scheme: SignatureScheme = DEFAULT_SCHEME,
               contracts: Optional[Mapping[str, ContractHandler]] = None) -> WorldState:
    log_ = PersistedLog()
    for rec in records:
        log_.append(rec)
    return StateNode.recover(-1, cfg, genesis, log_, scheme, contracts).state


def secure_read(key, nodes: Sequence, f: int) -> Hashable:
    """Read ``key`` by querying 2f+1 distinct nodes and matching f+1 answers.

    ``nodes`` are objects with ``node_id`` and ``read(key)``; a read may return
    None to model a missing response.
    """
    ids = []
    chosen = []
    for node in nodes:
        if node.node_id not in ids:
            ids.append(node.node_id)
            chosen.append(node)
        if len(chosen) == 2 * f + 1:
            break
    if len(chosen) < 2 * f + 1:
        raise ValueError(f"need {2 * f + 1} distinct nodes, got {len(chosen)}")
    tally: Counter = Counter()
    for node in chosen:
        resp = node.read(key)
        if resp is None or resp.responder != node.node_id:
            continue
        try:
            tally[(resp.height, resp.state_digest, resp.value)] += 1
        except TypeError:
            continue  # unhashable garbage
    if tally:
        (_, _, value), count = tally.most_common(1)[0]
        if count >= f + 1:
            return value
    raise NoQuorum(f"no {f + 1} matching responses for {key!r}")
