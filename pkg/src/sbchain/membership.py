"""Committee rotation: threshold-gated pseudo-random choice of the next committee.

Registration and votes run as ordinary committed transactions against the
built-in ``@membership`` contract, so every correct node derives the same
committee from the same log. Payloads are JSON objects::

    {"op": "register", "endpoints": [...], "member": 3, "wallets": [...]}
    {"op": "vote", "val": 4}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import BadInput, ChainError
from .execution import ContractCall, ContractFault, ContractResult

MEMBERSHIP_ADDRESS = "@membership"
SEED_RANGE = range(10)


class Unauthorized(ChainError):
    pass


class Rejected(ChainError):
    pass


@dataclass
class CommitteeRegistry:
    chairperson: str
    committee: list[str] = field(default_factory=list)
    wallet_to_endpoint: dict[str, str] = field(default_factory=dict)
    has_called: dict[str, bool] = field(default_factory=dict)
    vote_tally: dict[int, int] = field(default_factory=dict)
    member: int = 0
    selections: list[tuple[str, ...]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.committee)

    @property
    def threshold(self) -> int:
        return (self.size - 1) // 3 + 1

    @property
    def select(self) -> int:
        return self.size // self.member if self.member else 0

    def add_participants(self, caller: str, endpoints: Sequence[str], member: int,
                         wallets: Sequence[str]) -> None:
        if caller != self.chairperson:
            raise Unauthorized("only the chairperson can register participants")
        if len(endpoints) != len(wallets):
            raise BadInput("endpoints and wallets differ in length")
        if len(set(endpoints)) != len(endpoints) or len(set(wallets)) != len(wallets):
            raise BadInput("duplicate endpoint or wallet")
        if not 1 <= member <= len(endpoints):
            raise BadInput(f"member must be in [1, {len(endpoints)}], got {member}")
        # A new registration replaces the previous committee entirely.
        self.committee = list(endpoints)
        self.wallet_to_endpoint = dict(zip(wallets, endpoints))
        self.has_called = {e: False for e in endpoints}
        self.vote_tally = {}
        self.member = member

    def rotate_vote(self, caller: str, val: int) -> Optional[tuple[str, ...]]:
        """Record a vote; returns the selected committee slice once a seed reaches the threshold."""
        endpoint = self.wallet_to_endpoint.get(caller)
        if endpoint is None:
            raise Rejected(f"{caller} is not registered")
        if self.has_called.get(endpoint):
            raise Rejected(f"{endpoint} already voted this round")
        if val not in SEED_RANGE:
            raise Rejected(f"seed {val} outside 0..9")
        self.has_called[endpoint] = True
        self.vote_tally[val] = self.vote_tally.get(val, 0) + 1
        if self.vote_tally[val] < self.threshold:
            return None
        option = val % self.select
        chosen = tuple(self.committee[option * self.member:(option + 1) * self.member])
        self.selections.append(chosen)
        self.vote_tally = {}
        self.has_called = {e: False for e in self.committee}
        return chosen

    # -- contract storage ------------------------------------------------

    def to_bytes(self) -> bytes:
        doc = {
            "chairperson": self.chairperson,
            "committee": self.committee,
            "wallets": sorted(self.wallet_to_endpoint.items()),
            "called": sorted(e for e, v in self.has_called.items() if v),
            "tally": sorted(self.vote_tally.items()),
            "member": self.member,
            "selections": [list(s) for s in self.selections],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CommitteeRegistry":
        doc = json.loads(data)
        reg = cls(doc["chairperson"], list(doc["committee"]), dict(map(tuple, doc["wallets"])))
        called = set(doc["called"])
        reg.has_called = {e: e in called for e in reg.committee}
        reg.vote_tally = {int(k): v for k, v in doc["tally"]}
        reg.member = doc["member"]
        reg.selections = [tuple(s) for s in doc["selections"]]
        return reg


def membership_contract(chairperson: str):
    """Build the handler for the ``@membership`` built-in contract."""

    def handler(call: ContractCall) -> ContractResult:
        reg = CommitteeRegistry.from_bytes(call.storage) if call.storage else CommitteeRegistry(chairperson)
        try:
            op = json.loads(call.payload)
            kind = op["op"]
            if kind == "register":
                reg.add_participants(call.caller, op["endpoints"], op["member"], op["wallets"])
                events = (("registered", reg.size),)
            elif kind == "vote":
                chosen = reg.rotate_vote(call.caller, op["val"])
                events = (("committee", chosen),) if chosen else ()
            else:
                raise BadInput(f"unknown op {kind!r}")
        except (ChainError, ValueError, KeyError, TypeError) as e:
            raise ContractFault(f"{type(e).__name__}: {e}") from None
        return ContractResult(storage=reg.to_bytes(), events=events)

    return handler


def register_payload(endpoints: Sequence[str], member: int, wallets: Sequence[str]) -> bytes:
    return json.dumps({"op": "register", "endpoints": list(endpoints), "member": member,
                       "wallets": list(wallets)}).encode()


def vote_payload(val: int) -> bytes:
    return json.dumps({"op": "vote", "val": val}).encode()


def committee_from_state(state) -> Optional[tuple[str, ...]]:
    """Latest committee selected by the contract in ``state``, if any."""
    raw = state.contracts.get(MEMBERSHIP_ADDRESS)
    if not raw:
        return None
    sel = CommitteeRegistry.from_bytes(raw).selections
    return sel[-1] if sel else None
