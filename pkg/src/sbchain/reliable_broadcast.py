"""Bracha-style byzantine reliable broadcast, one instance per (index, broadcaster).

INIT carries the whole block; ECHO and READY carry its digest. A node that
collects a READY quorum for a digest it never received fetches the payload
with FETCH/SUPPLY, so digest-only echoes keep the totality guarantee.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from .core import (
    DIGEST_SIZE,
    BadInput,
    Block,
    ContractViolation,
    DecodeError,
    Digest,
    _Reader,
    canonical_decode,
)


class MsgType(IntEnum):
    INIT = 0
    ECHO = 1
    READY = 2
    EST = 3
    AUX = 4
    COORD = 5
    FETCH = 6
    SUPPLY = 7


RB_TYPES = frozenset({MsgType.INIT, MsgType.ECHO, MsgType.READY, MsgType.FETCH, MsgType.SUPPLY})


@dataclass(frozen=True)
class RbMessage:
    kind: MsgType
    index: int
    broadcaster: int
    sender: int
    digest: Digest
    block: Optional[Block] = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.index, self.broadcaster)


Send = tuple[int, object]  # (destination node id, message)

_HDR = struct.Struct(">BQII")


def encode_rb(msg: RbMessage) -> bytes:
    out = _HDR.pack(msg.kind, msg.index, msg.broadcaster, msg.sender) + msg.digest
    if msg.kind in (MsgType.INIT, MsgType.SUPPLY):
        raw = msg.block.encoded
        out += struct.pack(">I", len(raw)) + raw
    return out


def decode_rb(data: bytes) -> RbMessage:
    r = _Reader(data)
    kind, index, broadcaster, sender = _HDR.unpack(r.take(_HDR.size))
    try:
        kind = MsgType(kind)
    except ValueError:
        raise DecodeError(f"bad message type {kind}") from None
    if kind not in RB_TYPES:
        raise DecodeError(f"{kind.name} is not a broadcast message")
    digest = r.take(DIGEST_SIZE)
    block = None
    if kind in (MsgType.INIT, MsgType.SUPPLY):
        block = canonical_decode(r.blob())
        if not isinstance(block, Block):
            raise DecodeError("payload is not a block")
    r.end()
    return RbMessage(kind, index, broadcaster, sender, digest, block)


def echo_threshold(n: int, f: int) -> int:
    """Smallest echo quorum such that two quorums share a correct node."""
    return (n + f) // 2 + 1


class RbInstance:
    def __init__(self, index: int, broadcaster: int, n: int, f: int):
        self.index = index
        self.broadcaster = broadcaster
        self.n = n
        self.f = f
        self.echo_sets: dict[Digest, set[int]] = {}
        self.ready_sets: dict[Digest, set[int]] = {}
        self.payloads: dict[Digest, Block] = {}
        self.echoed: Optional[Digest] = None
        self.readied: Optional[Digest] = None
        self.delivered: Optional[Block] = None
        self.fetching: Optional[Digest] = None
        self.equivocation = False
        self.broadcast_done = False
        self._snap: Optional[tuple] = None

    @property
    def phase(self) -> str:
        if self.delivered is not None:
            return "delivered"
        if self.readied is not None:
            return "ready"
        if self.echoed is not None:
            return "echoed"
        return "init"

    def _all(self, kind: MsgType, me: int, digest: Digest, block=None) -> list[Send]:
        msg = RbMessage(kind, self.index, self.broadcaster, me, digest, block)
        return [(dst, msg) for dst in range(self.n)]

    def broadcast(self, me: int, block: Block) -> list[Send]:
        if me != self.broadcaster:
            raise ContractViolation("only the broadcaster may start its instance")
        if self.broadcast_done:
            raise ContractViolation(f"duplicate broadcast for {(self.index, me)}")
        if block.proposer != me or block.digest is not None or block.parent_digest is not None:
            raise BadInput("proposed blocks carry their proposer id and no hashes")
        self.broadcast_done = True
        return self._all(MsgType.INIT, me, block.payload_digest, block)

    def handle(self, me: int, msg: RbMessage) -> tuple[list[Send], Optional[Block]]:
        """Process one authenticated message; returns (sends, delivered block)."""
        self._snap = None
        kind = msg.kind
        out: list[Send] = []
        if kind == MsgType.INIT:
            if msg.sender != self.broadcaster or not self._valid_payload(msg.block):
                return out, None
            d = msg.block.payload_digest
            self.payloads.setdefault(d, msg.block)
            if self.echoed is None:
                self.echoed = d
                out += self._all(MsgType.ECHO, me, d)
            elif d != self.echoed:
                self.equivocation = True
            return out, self._try_deliver(me, out)
        if kind == MsgType.ECHO:
            senders = self.echo_sets.setdefault(msg.digest, set())
            if msg.sender in senders:
                return out, None
            senders.add(msg.sender)
            if self.readied is None and len(senders) >= echo_threshold(self.n, self.f):
                self.readied = msg.digest
                out += self._all(MsgType.READY, me, msg.digest)
            return out, self._try_deliver(me, out)
        if kind == MsgType.READY:
            senders = self.ready_sets.setdefault(msg.digest, set())
            if msg.sender in senders:
                return out, None
            senders.add(msg.sender)
            if self.readied is None and len(senders) >= self.f + 1:
                self.readied = msg.digest
                out += self._all(MsgType.READY, me, msg.digest)
            return out, self._try_deliver(me, out)
        if kind == MsgType.FETCH:
            block = self.payloads.get(msg.digest)
            if block is not None:
                out.append((msg.sender, RbMessage(MsgType.SUPPLY, self.index, self.broadcaster, me, msg.digest, block)))
            return out, None
        if kind == MsgType.SUPPLY:
            if self._valid_payload(msg.block) and msg.block.payload_digest == msg.digest:
                self.payloads.setdefault(msg.digest, msg.block)
                return out, self._try_deliver(me, out)
        return out, None

    def _valid_payload(self, block) -> bool:
        return (
            isinstance(block, Block)
            and block.proposer == self.broadcaster
            and block.digest is None
            and block.parent_digest is None
        )

    def _try_deliver(self, me: int, out: list[Send]) -> Optional[Block]:
        if self.delivered is not None:
            return None
        for d, senders in self.ready_sets.items():
            if len(senders) >= 2 * self.f + 1:
                block = self.payloads.get(d)
                if block is None:
                    if self.fetching != d:
                        self.fetching = d
                        out += self._all(MsgType.FETCH, me, d)
                    return None
                self.delivered = block
                return block
        return None

    def snapshot(self) -> tuple:
        """Hashable summary used by state-space exploration."""
        if self._snap is None:
            self._snap = self._summary()
        return self._snap

    def _summary(self) -> tuple:
        return (
            tuple(sorted((d, frozenset(s)) for d, s in self.echo_sets.items())),
            tuple(sorted((d, frozenset(s)) for d, s in self.ready_sets.items())),
            frozenset(self.payloads),
            self.echoed,
            self.readied,
            None if self.delivered is None else self.delivered.payload_digest,
            self.fetching,
        )

    def clone(self) -> "RbInstance":
        c = RbInstance.__new__(RbInstance)
        c.__dict__.update(self.__dict__)
        c.echo_sets = {d: set(s) for d, s in self.echo_sets.items()}
        c.ready_sets = {d: set(s) for d, s in self.ready_sets.items()}
        c.payloads = dict(self.payloads)
        return c
