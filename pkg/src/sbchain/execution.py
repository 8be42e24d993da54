"""Eager/lazy transaction validation and deterministic execution."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, NamedTuple, Optional

from .core import (
    DEFAULT_SCHEME,
    ChainConfig,
    ContractViolation,
    DecodeError,
    Digest,
    SignatureScheme,
    Transaction,
    _Reader,
    digest_of,
    verify_signature,
)

INTRINSIC_GAS = 21
# Payloads starting with this marker model a contract call that reverts.
FAULT_MARKER = b"!fault"

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class Reason(str, Enum):
    BAD_NONCE = "BadNonce"
    INSUFFICIENT_BALANCE = "InsufficientBalance"
    GAS_TOO_LOW = "GasTooLow"
    EXCEEDS_BLOCK_GAS = "ExceedsBlockGas"
    BAD_SIGNATURE = "BadSignature"
    OVERSIZED = "Oversized"
    STALE_NONCE = "StaleNonce"


@dataclass(frozen=True)
class ValidationVerdict:
    accepted: bool
    reason: Optional[Reason]
    kind: str  # "eager" | "lazy"

    def __post_init__(self):
        if self.accepted and self.reason is not None:
            raise ValueError("accepted verdicts carry no reason")


@dataclass
class ValidationCounters:
    """Per-node tallies; only ever incremented."""

    eager: int = 0
    lazy: int = 0


class Account(NamedTuple):
    balance: int
    nonce: int


_EMPTY = Account(0, 0)


class WorldState:
    """Balances, nonces, stored payloads and built-in contract storage.

    Mutators are used by the commit pipeline on a private working copy;
    :func:`apply_transaction` never mutates its input.
    """

    __slots__ = ("accounts", "payloads", "contracts", "height", "_digest")

    def __init__(
        self,
        accounts: Optional[dict[str, Account]] = None,
        payloads: Optional[dict[tuple[str, int], bytes]] = None,
        contracts: Optional[dict[str, bytes]] = None,
        height: int = 0,
    ):
        self.accounts = dict(accounts or {})
        self.payloads = dict(payloads or {})
        self.contracts = dict(contracts or {})
        self.height = height
        self._digest: Optional[Digest] = None

    @classmethod
    def genesis(cls, balances: Mapping[str, int], contracts: Optional[Mapping[str, bytes]] = None) -> "WorldState":
        if any(b < 0 for b in balances.values()):
            raise ValueError("negative genesis balance")
        return cls({a: Account(b, 0) for a, b in balances.items()}, contracts=dict(contracts or {}))

    def account(self, who: str) -> Account:
        return self.accounts.get(who, _EMPTY)

    def balance(self, who: str) -> int:
        return self.accounts.get(who, _EMPTY).balance

    def nonce(self, who: str) -> int:
        return self.accounts.get(who, _EMPTY).nonce

    def total_supply(self, exclude: Iterable[str] = ()) -> int:
        skip = set(exclude)
        return sum(a.balance for k, a in self.accounts.items() if k not in skip)

    def copy(self) -> "WorldState":
        out = WorldState(self.accounts, self.payloads, self.contracts, self.height)
        out._digest = self._digest
        return out

    # mutators
    def set_account(self, who: str, balance: int, nonce: int) -> None:
        if balance < 0:
            raise ContractViolation(f"negative balance for {who}")
        self.accounts[who] = Account(balance, nonce)
        self._digest = None

    def store_payload(self, who: str, nonce: int, data: bytes) -> None:
        self.payloads[(who, nonce)] = data
        self._digest = None

    def set_contract_storage(self, address: str, data: bytes) -> None:
        self.contracts[address] = data
        self._digest = None

    def bump_height(self) -> None:
        self.height += 1
        self._digest = None

    # canonical form
    def serialize(self) -> bytes:
        out = [b"WS", _U64.pack(self.height), _U32.pack(len(self.accounts))]
        for who in sorted(self.accounts):
            a = self.accounts[who]
            raw = who.encode()
            out += [_U32.pack(len(raw)), raw, _U64.pack(a.balance), _U64.pack(a.nonce)]
        out.append(_U32.pack(len(self.payloads)))
        for (who, nonce) in sorted(self.payloads):
            raw, data = who.encode(), self.payloads[(who, nonce)]
            out += [_U32.pack(len(raw)), raw, _U64.pack(nonce), _U32.pack(len(data)), data]
        out.append(_U32.pack(len(self.contracts)))
        for addr in sorted(self.contracts):
            raw, data = addr.encode(), self.contracts[addr]
            out += [_U32.pack(len(raw)), raw, _U32.pack(len(data)), data]
        return b"".join(out)

    @classmethod
    def deserialize(cls, data: bytes) -> "WorldState":
        r = _Reader(data)
        if r.take(2) != b"WS":
            raise DecodeError("not a state snapshot")
        height = r.u64()
        accounts = {}
        for _ in range(r.u32()):
            who = r.str()
            accounts[who] = Account(r.u64(), r.u64())
        payloads = {}
        for _ in range(r.u32()):
            who = r.str()
            nonce = r.u64()
            payloads[(who, nonce)] = r.blob()
        contracts = {}
        for _ in range(r.u32()):
            addr = r.str()
            contracts[addr] = r.blob()
        r.end()
        return cls(accounts, payloads, contracts, height)

    @property
    def state_digest(self) -> Digest:
        if self._digest is None:
            self._digest = digest_of(self.serialize())
        return self._digest

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return self.serialize() == other.serialize()

    def __repr__(self):
        return f"WorldState(height={self.height}, accounts={len(self.accounts)}, digest={self.state_digest.hex()[:12]})"


def export_snapshot(state: WorldState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(state.serialize())


def import_snapshot(path) -> WorldState:
    with open(path, "rb") as fh:
        return WorldState.deserialize(fh.read())


# -- built-in contracts ------------------------------------------------------


class ContractFault(Exception):
    """Raised by a built-in contract to revert the calling transaction."""


@dataclass(frozen=True)
class ContractCall:
    address: str
    caller: str
    amount: int
    payload: bytes
    storage: Optional[bytes]
    state: WorldState
    tx: Transaction


@dataclass(frozen=True)
class ContractResult:
    storage: Optional[bytes] = None
    # (account, delta) pairs applied on top of the plain value transfer.
    balance_deltas: tuple[tuple[str, int], ...] = ()
    events: tuple = ()


ContractHandler = Callable[[ContractCall], ContractResult]


@dataclass(frozen=True)
class ExecutionOutcome:
    tx_id: Digest
    success: bool
    error: Optional[str] = None
    events: tuple = ()


# -- validation --------------------------------------------------------------


def _reject(reason: Reason, kind: str) -> ValidationVerdict:
    return ValidationVerdict(False, reason, kind)


_EAGER_OK = ValidationVerdict(True, None, "eager")
_LAZY_OK = ValidationVerdict(True, None, "lazy")


def eager_validate(
    tx: Transaction,
    state: WorldState,
    cfg: ChainConfig,
    scheme: SignatureScheme = DEFAULT_SCHEME,
    counters: Optional[ValidationCounters] = None,
) -> ValidationVerdict:
    if counters is not None:
        counters.eager += 1
    if tx.size > cfg.max_tx_size:
        return _reject(Reason.OVERSIZED, "eager")
    if not verify_signature(tx, scheme):
        return _reject(Reason.BAD_SIGNATURE, "eager")
    acct = state.account(tx.sender)
    if tx.nonce < acct.nonce:
        return _reject(Reason.STALE_NONCE, "eager")
    if tx.nonce >= acct.nonce + cfg.nonce_window:
        return _reject(Reason.BAD_NONCE, "eager")
    if tx.gas_limit < cfg.intrinsic_gas:
        return _reject(Reason.GAS_TOO_LOW, "eager")
    if tx.gas_limit > cfg.max_block_gas:
        return _reject(Reason.EXCEEDS_BLOCK_GAS, "eager")
    if acct.balance < tx.amount + cfg.flat_gas_fee:
        return _reject(Reason.INSUFFICIENT_BALANCE, "eager")
    return _EAGER_OK


def lazy_validate(
    tx: Transaction,
    state: WorldState,
    cfg: Optional[ChainConfig] = None,
    counters: Optional[ValidationCounters] = None,
    expected_nonce: Optional[int] = None,
) -> ValidationVerdict:
    """Nonce and gas only.

    ``expected_nonce`` overrides the state's nonce when validating several
    transactions of one sender before any of them executes.
    """
    if counters is not None:
        counters.lazy += 1
    nonce = state.nonce(tx.sender) if expected_nonce is None else expected_nonce
    if tx.nonce < nonce:
        return _reject(Reason.STALE_NONCE, "lazy")
    if tx.nonce > nonce:
        return _reject(Reason.BAD_NONCE, "lazy")
    if tx.gas_limit < (cfg.intrinsic_gas if cfg else INTRINSIC_GAS):
        return _reject(Reason.GAS_TOO_LOW, "lazy")
    return _LAZY_OK


# -- execution ---------------------------------------------------------------


def execute_in_place(
    tx: Transaction,
    state: WorldState,
    cfg: ChainConfig,
    scheme: SignatureScheme = DEFAULT_SCHEME,
    contracts: Optional[Mapping[str, ContractHandler]] = None,
) -> ExecutionOutcome:
    """Execute ``tx`` against ``state``, mutating it.

    A failed execution leaves only the nonce increment behind. A transaction
    whose signature does not verify is not attributable to its claimed sender
    and leaves no trace at all.
    """
    acct = state.account(tx.sender)
    if tx.nonce != acct.nonce:
        raise ContractViolation(f"nonce {tx.nonce} != account nonce {acct.nonce}")
    if not verify_signature(tx, scheme):
        return ExecutionOutcome(tx.tx_id, False, "BadSignature")

    def fail(err: str) -> ExecutionOutcome:
        state.set_account(tx.sender, acct.balance, acct.nonce + 1)
        return ExecutionOutcome(tx.tx_id, False, err)

    fee = cfg.flat_gas_fee
    if acct.balance < tx.amount + fee:
        return fail("InsufficientBalance")
    if tx.recipient is None and tx.amount:
        return fail("NoRecipient")
    if tx.payload.startswith(FAULT_MARKER):
        return fail("PayloadFault")

    deltas: dict[str, int] = {tx.sender: -(tx.amount + fee)}
    if tx.recipient is not None:
        deltas[tx.recipient] = deltas.get(tx.recipient, 0) + tx.amount
    if fee:
        deltas[cfg.fee_account] = deltas.get(cfg.fee_account, 0) + fee

    events: tuple = ()
    new_storage = None
    handler = contracts.get(tx.recipient) if (contracts and tx.recipient) else None
    if handler is not None:
        call = ContractCall(tx.recipient, tx.sender, tx.amount, tx.payload,
                            state.contracts.get(tx.recipient), state, tx)
        try:
            result = handler(call)
        except ContractFault as e:
            return fail(f"ContractFault: {e}")
        for who, d in result.balance_deltas:
            deltas[who] = deltas.get(who, 0) + d
        events = result.events
        new_storage = result.storage

    for who, d in deltas.items():
        if state.balance(who) + d < 0:
            return fail("InsufficientBalance")
    for who in sorted(deltas):
        a = state.account(who)
        nonce = a.nonce + 1 if who == tx.sender else a.nonce
        state.set_account(who, a.balance + deltas[who], nonce)
    if tx.payload:
        state.store_payload(tx.sender, tx.nonce, tx.payload)
    if new_storage is not None:
        state.set_contract_storage(tx.recipient, new_storage)
    return ExecutionOutcome(tx.tx_id, True, None, events)


def apply_transaction(
    tx: Transaction,
    state: WorldState,
    cfg: Optional[ChainConfig] = None,
    scheme: SignatureScheme = DEFAULT_SCHEME,
    contracts: Optional[Mapping[str, ContractHandler]] = None,
) -> tuple[WorldState, ExecutionOutcome]:
    cfg = cfg or ChainConfig()
    if not lazy_validate(tx, state, cfg).accepted:
        raise ContractViolation("apply_transaction requires a lazily valid transaction")
    new = state.copy()
    outcome = execute_in_place(tx, new, cfg, scheme, contracts)
    return new, outcome
