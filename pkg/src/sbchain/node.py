"""A full node: a consensus engine and a state node joined by the commit channel."""

from __future__ import annotations

from typing import Mapping, Optional

from .core import Block, ChainConfig, Superblock, Transaction
from .execution import ContractHandler, WorldState
from .membership import committee_from_state
from .state_node import PER_BLOCK, CommitResult, StateNode
from .superblock_consensus import ConsensusEngine, Effects


class ChainNode:
    """Glue between the consensus side and the execution side.

    ``max_queued_blocks`` bounds the proposals waiting in the block queue;
    while it is full the pool keeps filling and eventually overflows.
    """

    def __init__(
        self,
        node_id: int,
        cfg: ChainConfig,
        genesis: WorldState,
        timeout_base: int = 100,
        max_queued_blocks: int = 1,
        mode: str = PER_BLOCK,
        contracts: Optional[Mapping[str, ContractHandler]] = None,
    ):
        self.node_id = node_id
        self.cfg = cfg
        self.max_queued_blocks = max_queued_blocks
        self.engine = ConsensusEngine(node_id, cfg.n, cfg.f, timeout_base)
        self.state = StateNode(node_id, cfg, genesis, contracts=contracts, mode=mode)
        self.committing: Optional[Superblock] = None
        # index -> committee selected by the membership contract, effective from that index
        self.committee_schedule: dict[int, tuple[str, ...]] = {}

    def submit(self, tx: Transaction, timestamp: int) -> tuple[Optional[str], Effects]:
        reason = self.state.submit_transaction(tx)
        fx = self.maybe_propose(timestamp) if reason is None else Effects()
        return reason, fx

    def maybe_propose(self, timestamp: int, force: bool = False) -> Effects:
        fx = Effects()
        while len(self.engine.block_queue) < self.max_queued_blocks:
            block = self.state.build_proposal(timestamp, force=force)
            if block is None:
                break
            self._merge(fx, self.engine.submit_block(block))
        return fx

    def enqueue_block(self, block: Block) -> Effects:
        return self.engine.submit_block(block)

    def next_superblock(self) -> Optional[Superblock]:
        """Pop the next decided superblock unless one is already being committed."""
        if self.committing is not None or not self.engine.commit_channel:
            return None
        self.committing = self.engine.commit_channel.popleft()
        return self.committing

    def commit(self, sb: Superblock) -> CommitResult:
        before = self._committee()
        result = self.state.commit_superblock(sb)
        after = self._committee()
        if after is not None and after != before:
            self.committee_schedule[sb.index + 1] = after
        return result

    def finish_commit(self, timestamp: int) -> Effects:
        sb = self.committing
        self.committing = None
        fx = self.engine.on_committed(sb.index)
        self._merge(fx, self.maybe_propose(timestamp))
        return fx

    def _committee(self):
        return committee_from_state(self.state.state)

    @staticmethod
    def _merge(into: Effects, other: Effects) -> None:
        into.sends += other.sends
        into.timers += other.timers
        into.superblocks += other.superblocks
        into.events += other.events
