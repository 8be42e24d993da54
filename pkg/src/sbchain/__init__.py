"""Superblock BFT chain: reliable broadcast, binary consensus, a superblock
reduction, a validating state node, and a deterministic simulator."""

from .core import (
    Block,
    ChainConfig,
    Superblock,
    Transaction,
    canonical_decode,
    canonical_encode,
    digest_of,
    make_transaction,
)
from .execution import WorldState, apply_transaction, eager_validate, lazy_validate
from .state_node import StateNode, secure_read
from .superblock_consensus import ConsensusEngine

__version__ = "0.1.0"

__all__ = [
    "Block",
    "ChainConfig",
    "ConsensusEngine",
    "StateNode",
    "Superblock",
    "Transaction",
    "WorldState",
    "apply_transaction",
    "canonical_decode",
    "canonical_encode",
    "digest_of",
    "eager_validate",
    "lazy_validate",
    "make_transaction",
    "secure_read",
]
