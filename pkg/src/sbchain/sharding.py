"""Beacon-chain shard spawning and non-atomic cross-shard transfers.

Each chain here is a :class:`Ledger`, a state node that commits one
single-block superblock per operation. Consensus between the nodes of a shard
is exercised separately by the simulator; the directory only needs the
committed state transitions.

Deposits move to the beacon's ``@shards`` escrow account. A cross-shard
transfer is a withdraw on the source chain (paid into its ``@bridge``
account, which takes the funds out of circulation) followed, at some later
point, by a credit on the destination chain minted by its ``@bridge``
contract. Credits carry a reference to the withdraw and are deduplicated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .core import (
    DEFAULT_SCHEME,
    BadInput,
    Block,
    ChainConfig,
    ChainError,
    Digest,
    Superblock,
    make_transaction,
    sort_transactions,
)
from .execution import ContractCall, ContractFault, ContractResult, ExecutionOutcome, WorldState
from .state_node import StateNode

ESCROW_ACCOUNT = "@shards"
BRIDGE_ACCOUNT = "@bridge"
RELAYER = "@relayer"
SYSTEM_ACCOUNTS = frozenset({ESCROW_ACCOUNT, BRIDGE_ACCOUNT, RELAYER})


class ShardError(ChainError):
    pass


def bridge_contract(call: ContractCall) -> ContractResult:
    """Mint a credit once per withdraw reference; plain payments just burn."""
    if not call.payload:
        return ContractResult()
    try:
        op = json.loads(call.payload)
        if op.get("op") != "credit":
            return ContractResult(storage=call.storage)
        ref, to, amount = json.dumps(op["ref"]), op["to"], int(op["amount"])
    except (ValueError, KeyError, TypeError) as e:
        raise ContractFault(f"bad credit payload: {e}") from None
    seen = set(json.loads(call.storage)) if call.storage else set()
    if ref in seen:
        raise ContractFault("credit already applied")
    if amount <= 0 or to in SYSTEM_ACCOUNTS:
        raise ContractFault("bad credit")
    seen.add(ref)
    storage = json.dumps(sorted(seen)).encode()
    return ContractResult(storage=storage, balance_deltas=((to, amount),), events=(("credit", to, amount),))


class Ledger:
    """A chain instance whose operations commit immediately, one block each."""

    def __init__(self, name: str, balances: Mapping[str, int], cfg: Optional[ChainConfig] = None):
        self.name = name
        cfg = cfg or ChainConfig(n=1, f=0, proposal_threshold=1)
        self.node = StateNode(0, cfg, WorldState.genesis(balances), contracts={BRIDGE_ACCOUNT: bridge_contract})

    @property
    def state(self) -> WorldState:
        return self.node.state

    @property
    def height(self) -> int:
        return self.node.committed_index

    def transaction(self, sender: str, recipient: str, amount: int, payload: bytes = b"", nonce_offset: int = 0):
        return make_transaction(sender, self.state.nonce(sender) + nonce_offset, recipient=recipient,
                                amount=amount, payload=payload, scheme=DEFAULT_SCHEME)

    def commit(self, txs: Sequence) -> tuple[int, Digest, list[ExecutionOutcome]]:
        """Commit ``txs`` as one block; returns (index, block digest, outcomes)."""
        index = self.height + 1
        sb = Superblock(index, (Block(0, sort_transactions(txs), index),))
        res = self.node.commit_superblock(sb)
        if res.rejected:
            raise ShardError(f"{self.name}: lazily rejected {[v.reason for _, v in res.rejected]}")
        return index, self.node.last_digest, res.outcomes

    def circulating(self) -> int:
        return self.state.total_supply(exclude=(BRIDGE_ACCOUNT,))


@dataclass
class Shard:
    shard_id: int
    chain: Ledger
    deposits: dict[str, int]
    nodes: frozenset[int]
    escrowed: int
    open: bool = True


@dataclass
class TransferRecord:
    src: int
    dst: int
    account: str
    amount: int
    withdraw_ref: tuple  # (shard, index, slot, digest hex)
    withdraw_committed: bool = True
    credit_committed: bool = False


@dataclass
class ShardDirectory:
    beacon: Ledger
    shards: dict[int, Shard] = field(default_factory=dict)
    transfers: list[TransferRecord] = field(default_factory=list)
    genesis_total: int = 0

    @classmethod
    def create(cls, balances: Mapping[str, int]) -> "ShardDirectory":
        if any(k in SYSTEM_ACCOUNTS for k in balances):
            raise BadInput("genesis balances may not use system accounts")
        beacon = Ledger("beacon", balances)
        return cls(beacon, genesis_total=beacon.state.total_supply())

    @property
    def in_flight(self) -> list[TransferRecord]:
        return [t for t in self.transfers if not t.credit_committed]

    def spawn_shard(self, deposits: Mapping[str, int], nodes: Sequence[int]) -> int:
        if not deposits:
            raise BadInput("a shard needs at least one deposit")
        if any(v <= 0 for v in deposits.values()) or any(k in SYSTEM_ACCOUNTS for k in deposits):
            raise BadInput("deposits must be positive and from user accounts")
        node_set = frozenset(nodes)
        if not node_set:
            raise BadInput("a shard needs nodes")
        for s in self.shards.values():
            if s.open and s.nodes & node_set:
                raise BadInput(f"nodes overlap with shard {s.shard_id}")
        # Check every depositor first so a failure escrows nothing.
        for who, amount in deposits.items():
            if self.beacon.state.balance(who) < amount:
                raise ShardError(f"{who} cannot deposit {amount}")
        shard_id = len(self.shards) + 1
        payload = json.dumps({"op": "deposit", "shard": shard_id}).encode()
        txs = [self.beacon.transaction(who, ESCROW_ACCOUNT, amount, payload) for who, amount in sorted(deposits.items())]
        _, _, outcomes = self.beacon.commit(txs)
        assert all(o.success for o in outcomes)
        chain = Ledger(f"shard-{shard_id}", dict(deposits))
        self.shards[shard_id] = Shard(shard_id, chain, dict(deposits), node_set, sum(deposits.values()))
        return shard_id

    def withdraw(self, src: int, dst: int, account: str, amount: int) -> TransferRecord:
        """Commit the withdraw half of a transfer; the credit is left pending."""
        s, d = self._open(src), self._open(dst)
        if src == dst:
            raise BadInput("source and destination are the same shard")
        if amount <= 0:
            raise BadInput("amount must be positive")
        if s.chain.state.balance(account) < amount:
            raise ShardError(f"{account} has less than {amount} on shard {src}")
        payload = json.dumps({"op": "withdraw", "dst": d.shard_id}).encode()
        index, digest, outcomes = s.chain.commit([s.chain.transaction(account, BRIDGE_ACCOUNT, amount, payload)])
        if not outcomes[0].success:
            raise ShardError(f"withdraw failed: {outcomes[0].error}")
        rec = TransferRecord(src, dst, account, amount, (src, index, 0, digest.hex()))
        self.transfers.append(rec)
        return rec

    def credit(self, rec: TransferRecord) -> ExecutionOutcome:
        """Submit the credit for ``rec`` on its destination; replays are refused."""
        d = self._open(rec.dst)
        payload = json.dumps({"op": "credit", "ref": list(rec.withdraw_ref), "to": rec.account,
                              "amount": rec.amount}).encode()
        _, _, outcomes = d.chain.commit([d.chain.transaction(RELAYER, BRIDGE_ACCOUNT, 0, payload)])
        if outcomes[0].success:
            rec.credit_committed = True
        return outcomes[0]

    def cross_shard_transfer(self, src: int, dst: int, account: str, amount: int) -> TransferRecord:
        rec = self.withdraw(src, dst, account, amount)
        self.credit(rec)
        return rec

    def exit_shard(self, shard_id: int) -> dict[str, int]:
        """Close a shard and release its remaining balances from escrow."""
        s = self._open(shard_id)
        if any(t.src == shard_id or t.dst == shard_id for t in self.in_flight):
            raise ShardError("shard has transfers in flight")
        balances = {k: v for k, v in s.chain.state.accounts.items() if k not in SYSTEM_ACCOUNTS and v.balance}
        payout = {k: a.balance for k, a in balances.items()}
        txs = [self.beacon.transaction(ESCROW_ACCOUNT, who, amt, nonce_offset=i)
               for i, (who, amt) in enumerate(sorted(payout.items()))]
        if txs:
            self.beacon.commit(txs)
        s.open = False
        return payout

    def _open(self, shard_id: int) -> Shard:
        s = self.shards.get(shard_id)
        if s is None or not s.open:
            raise ShardError(f"no open shard {shard_id}")
        return s

    # -- audits ----------------------------------------------------------

    def balances(self) -> dict[str, int]:
        """Totals that the conservation audit is built from."""
        escrow = self.beacon.state.balance(ESCROW_ACCOUNT)
        return {
            "beacon_free": self.beacon.state.total_supply(exclude=(ESCROW_ACCOUNT,)),
            "escrow": escrow,
            "shards": sum(s.chain.circulating() for s in self.shards.values() if s.open),
            "in_flight": sum(t.amount for t in self.in_flight),
        }

    def conserved(self) -> bool:
        b = self.balances()
        return (
            b["beacon_free"] + b["escrow"] == self.genesis_total
            and b["shards"] + b["in_flight"] == b["escrow"]
        )

    def snapshot(self) -> dict:
        return {
            "balances": self.balances(),
            "shards": {
                sid: {"open": s.open, "nodes": sorted(s.nodes), "height": s.chain.height,
                      "state_digest": s.chain.state.state_digest.hex()}
                for sid, s in sorted(self.shards.items())
            },
            "in_flight": [vars(t) for t in self.in_flight],
        }
