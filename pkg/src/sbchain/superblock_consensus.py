"""Reduction of multivalue consensus to n binary consensus instances.

Every node reliably broadcasts its proposed block; a delivered block for
slot j makes the node propose 1 to binary consensus j. As soon as any slot
decides 1, the node proposes 0 for every slot it has not delivered yet.
Once all n slots are decided the superblock is the list of delivered blocks
whose slot decided 1, in slot order.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .binary_consensus import BC_TYPES, BcMessage, BinaryConsensus, TimerRequest
from .core import Block, ContractViolation, Superblock
from .reliable_broadcast import RB_TYPES, RbInstance, RbMessage

log = logging.getLogger(__name__)


@dataclass
class Effects:
    sends: list = field(default_factory=list)
    timers: list[TimerRequest] = field(default_factory=list)
    superblocks: list[Superblock] = field(default_factory=list)
    events: list[tuple] = field(default_factory=list)

    def extend_outputs(self, outputs) -> None:
        for o in outputs:
            if isinstance(o, TimerRequest):
                self.timers.append(o)
            else:
                self.sends.append(o)


class ReductionState:
    """Per-index state of the reduction at one node."""

    def __init__(self, index: int, me: int, n: int, f: int, timeout_base: int = 100):
        self.index = index
        self.me = me
        self.n = n
        self.f = f
        self.timeout_base = timeout_base
        self.blocks: list[Optional[Block]] = [None] * n
        self.dec_blocks: list[Optional[int]] = [None] * n
        self.dec_count = 0
        self.proposed: dict[int, int] = {}
        self.any_true = False
        self.rb: dict[int, RbInstance] = {}
        self.bc: dict[int, BinaryConsensus] = {}
        self.superblock: Optional[Superblock] = None
        self.my_block: Optional[Block] = None
        self.late_deliveries: list[tuple[int, Block]] = []
        self.dropped = 0

    def _rb(self, slot: int) -> RbInstance:
        inst = self.rb.get(slot)
        if inst is None:
            inst = self.rb[slot] = RbInstance(self.index, slot, self.n, self.f)
        return inst

    def _bc(self, slot: int) -> BinaryConsensus:
        inst = self.bc.get(slot)
        if inst is None:
            inst = self.bc[slot] = BinaryConsensus(self.index, slot, self.me, self.n, self.f, self.timeout_base)
        return inst

    def broadcast(self, block: Block, fx: Effects) -> None:
        if self.my_block is not None:
            raise ContractViolation(f"already proposed at index {self.index}")
        self.my_block = block
        fx.sends += self._rb(self.me).broadcast(self.me, block)

    def on_rb_message(self, msg: RbMessage, fx: Effects) -> None:
        if not 0 <= msg.broadcaster < self.n or not 0 <= msg.sender < self.n:
            self.dropped += 1
            return
        sends, delivered = self._rb(msg.broadcaster).handle(self.me, msg)
        fx.sends += sends
        if delivered is not None:
            self.on_rb_deliver(msg.broadcaster, delivered, fx)

    def on_rb_deliver(self, slot: int, block: Block, fx: Effects) -> None:
        if not 0 <= slot < self.n:
            self.dropped += 1
            return
        if self.blocks[slot] is not None:
            return
        self.blocks[slot] = block
        fx.events.append(("rb_deliver", self.index, slot))
        if slot in self.proposed:
            # Already proposed 0 for this slot: keep the block for audit only.
            self.late_deliveries.append((slot, block))
        else:
            self._propose(slot, 1, fx)
        self._try_finish(fx)

    def on_bc_message(self, msg: BcMessage, fx: Effects) -> None:
        if not 0 <= msg.slot < self.n or not 0 <= msg.sender < self.n:
            self.dropped += 1
            return
        inst = self._bc(msg.slot)
        fx.extend_outputs(inst.handle(msg))
        self._check_decision(inst, fx)

    def on_timer(self, req: TimerRequest, fx: Effects) -> None:
        inst = self.bc.get(req.slot_key[1])
        if inst is None:
            return
        fx.extend_outputs(inst.on_timeout(req.round))
        self._check_decision(inst, fx)

    def _propose(self, slot: int, bit: int, fx: Effects) -> None:
        self.proposed[slot] = bit
        inst = self._bc(slot)
        fx.extend_outputs(inst.propose(bit))
        self._check_decision(inst, fx)

    def _check_decision(self, inst: BinaryConsensus, fx: Effects) -> None:
        slot = inst.slot
        if inst.decided is None or self.dec_blocks[slot] is not None:
            return
        bit = inst.decided
        self.dec_blocks[slot] = bit
        self.dec_count += 1
        fx.events.append(("decide", self.index, slot, bit))
        if bit == 1 and not self.any_true:
            self.any_true = True
            for j in range(self.n):
                if self.blocks[j] is None and j not in self.proposed:
                    self._propose(j, 0, fx)
        self._try_finish(fx)

    def _try_finish(self, fx: Effects) -> None:
        if self.superblock is not None or self.dec_count < self.n:
            return
        chosen = []
        for i in range(self.n):
            if self.dec_blocks[i] == 1:
                if self.blocks[i] is None:
                    return  # decided 1, so the block is being reliably delivered
                chosen.append(self.blocks[i])
        self.superblock = Superblock(self.index, tuple(chosen))
        fx.superblocks.append(self.superblock)


class ConsensusEngine:
    """The consensus side of one node: block queue, one instance at a time.

    Messages for indices beyond the current one are buffered until the state
    node has committed the current superblock (commit-channel backpressure).
    """

    def __init__(self, me: int, n: int, f: int, timeout_base: int = 100):
        self.me = me
        self.n = n
        self.f = f
        self.timeout_base = timeout_base
        self.index = 1
        self.block_queue: deque[Block] = deque()
        self.instances: dict[int, ReductionState] = {}
        self.buffered: dict[int, list] = {}
        self.commit_channel: deque[Superblock] = deque()
        self.awaiting_commit = False
        self.dropped = 0

    def instance(self, index: int) -> ReductionState:
        inst = self.instances.get(index)
        if inst is None:
            inst = self.instances[index] = ReductionState(index, self.me, self.n, self.f, self.timeout_base)
        return inst

    def submit_block(self, block: Block) -> Effects:
        fx = Effects()
        self.block_queue.append(block)
        self.start_new_consensus(fx)
        return fx

    def start_new_consensus(self, fx: Effects) -> None:
        if not self.block_queue or self.awaiting_commit:
            return
        inst = self.instance(self.index)
        if inst.my_block is not None or self.me in inst.proposed:
            return  # already took part in this index; wait for the next
        inst.broadcast(self.block_queue[0], fx)
        fx.events.append(("propose", self.index, self.block_queue[0].payload_digest))
        self._after(inst, fx)

    def receive(self, msg) -> Effects:
        fx = Effects()
        idx = msg.index
        if idx < 1:
            self.dropped += 1
            return fx
        if idx > self.index:
            self.buffered.setdefault(idx, []).append(msg)
            return fx
        self._dispatch(msg, fx)
        return fx

    def _dispatch(self, msg, fx: Effects) -> None:
        inst = self.instance(msg.index)
        if msg.kind in RB_TYPES:
            inst.on_rb_message(msg, fx)
        elif msg.kind in BC_TYPES:
            inst.on_bc_message(msg, fx)
        else:
            self.dropped += 1
            return
        self._after(inst, fx)

    def on_timer(self, req: TimerRequest) -> Effects:
        fx = Effects()
        inst = self.instances.get(req.slot_key[0])
        if inst is not None:
            inst.on_timer(req, fx)
            self._after(inst, fx)
        return fx

    def _after(self, inst: ReductionState, fx: Effects) -> None:
        if inst.index != self.index or self.awaiting_commit or inst.superblock is None:
            return
        sb = inst.superblock
        head = self.block_queue[0] if self.block_queue else None
        if head is not None and inst.my_block is head:
            mine = [b for b in sb.blocks if b.proposer == self.me]
            if mine and mine[0].payload_digest == head.payload_digest:
                self.block_queue.popleft()
        self.commit_channel.append(sb)
        self.awaiting_commit = True

    def on_committed(self, index: int) -> Effects:
        if not self.awaiting_commit or index != self.index:
            raise ContractViolation(f"commit of {index} while at {self.index}")
        fx = Effects()
        self.awaiting_commit = False
        self.index += 1
        self.start_new_consensus(fx)
        # Messages for the new index may already complete it; the instance
        # stays live while awaiting commit, so dispatch all of them.
        for msg in self.buffered.pop(self.index, []):
            self._dispatch(msg, fx)
        return fx
