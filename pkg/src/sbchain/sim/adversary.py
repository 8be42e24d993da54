"""Byzantine behaviors, applied to the outbound traffic of the node they control.

The transport stays authenticated: a behavior can change what its own node
sends, to whom, and (through a hint) how slowly, but never the sender field.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Optional

from ..binary_consensus import BcMessage
from ..core import Block, Transaction, make_transaction, sort_transactions
from ..reliable_broadcast import MsgType, RbMessage

KINDS = ("silent", "equivocate_rb", "flood_invalid_tx", "delay_max", "flip_bits")


@dataclass
class Adversary:
    kind: str
    node_id: int
    rng: random.Random
    flood_blocks: int = 6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adversary {self.kind!r}; expected one of {KINDS}")

    @property
    def participates(self) -> bool:
        return self.kind != "silent"

    def outbound(self, dst: int, msg) -> list:
        """Messages actually sent to ``dst`` in place of ``msg``."""
        kind = self.kind
        if kind == "silent":
            return []
        if kind == "equivocate_rb" and isinstance(msg, RbMessage) and msg.kind == MsgType.INIT:
            if dst % 2 == 1:
                alt = twin_block(msg.block)
                return [replace(msg, digest=alt.payload_digest, block=alt)]
            return [msg]
        if kind == "flip_bits" and isinstance(msg, BcMessage):
            return [flip(msg)]
        return [msg]

    def delay_hint(self) -> Optional[str]:
        """``"max"`` asks the network to use its largest admissible delay."""
        return "max" if self.kind == "delay_max" else None

    def junk_block(self, index_hint: int, timestamp: int) -> Optional[Block]:
        """A proposal of transactions that never went through eager validation."""
        if self.kind != "flood_invalid_tx" or self.flood_blocks <= 0:
            return None
        self.flood_blocks -= 1
        r = self.rng
        txs: list[Transaction] = []
        for i in range(r.randint(1, 6)):
            sender = f"byz{self.node_id}-{index_hint}-{i}"
            choice = r.randrange(4)
            if choice == 0:  # forged signature
                tx = replace(make_transaction(f"acct{r.randrange(8)}", r.randrange(3), "sink", 1),
                             signature=bytes(32))
            elif choice == 1:  # overspend from an empty account
                tx = make_transaction(sender, 0, "sink", 10 ** 6)
            elif choice == 2:  # nonce far in the future
                tx = make_transaction(sender, 10 ** 4, "sink", 0)
            else:  # gas below intrinsic
                tx = make_transaction(sender, 0, "sink", 0, gas_limit=0)
            txs.append(tx)
        unique = {tx.key: tx for tx in txs}
        return Block(self.node_id, sort_transactions(list(unique.values())), timestamp)


def twin_block(block: Block) -> Block:
    """A conflicting block for the same slot."""
    return replace(block, timestamp=block.timestamp + 1)


def flip(msg: BcMessage) -> BcMessage:
    if msg.kind == MsgType.AUX:
        value = {1: 2, 2: 1}.get(msg.value, msg.value)
    else:
        value = 1 - msg.value
    return replace(msg, value=value)
