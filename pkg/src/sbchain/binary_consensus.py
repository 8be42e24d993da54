"""Deterministic binary consensus with a weak coordinator (DBFT style).

Each round runs a binary-value broadcast of estimates (relay after f+1
matching EST, accept into ``bin_values`` after 2f+1), then an AUX exchange
restricted to accepted values. The round's coordinator suggests a value; a
node adopts the suggestion if it was accepted locally before its round timer
fires. A node decides ``v`` when the AUX union is ``{v}`` and ``v`` matches
the round parity; it keeps participating for two more rounds so that
slower correct nodes can decide too.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

from .core import ContractViolation, DecodeError
from .reliable_broadcast import MsgType

BC_TYPES = frozenset({MsgType.EST, MsgType.AUX, MsgType.COORD})


@dataclass(frozen=True)
class BcMessage:
    kind: MsgType
    index: int
    slot: int
    sender: int
    round: int
    # EST/COORD: a bit. AUX: a bitmask (1 -> {0}, 2 -> {1}, 3 -> {0, 1}).
    value: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.index, self.slot)


@dataclass(frozen=True)
class TimerRequest:
    slot_key: tuple[int, int]
    round: int
    delay: int


Output = Union[tuple[int, BcMessage], TimerRequest]

_WIRE = struct.Struct(">BQIIQB")


def encode_bc(msg: BcMessage) -> bytes:
    return _WIRE.pack(msg.kind, msg.index, msg.slot, msg.sender, msg.round, msg.value)


def decode_bc(data: bytes) -> BcMessage:
    if len(data) != _WIRE.size:
        raise DecodeError("bad binary consensus message length")
    kind, index, slot, sender, rnd, value = _WIRE.unpack(data)
    try:
        kind = MsgType(kind)
    except ValueError:
        raise DecodeError(f"bad message type {kind}") from None
    if kind not in BC_TYPES:
        raise DecodeError(f"{kind.name} is not a binary consensus message")
    return BcMessage(kind, index, slot, sender, rnd, value)


def mask_to_set(mask: int) -> frozenset[int]:
    return frozenset(v for v in (0, 1) if mask & (1 << v))


def set_to_mask(values) -> int:
    return sum(1 << v for v in values)


class _Round:
    __slots__ = ("est_from", "est_sent", "bin_values", "first_bin", "aux_from",
                 "coord_value", "coord_sent", "timer_expired", "aux_sent")

    def __init__(self):
        self.est_from: tuple[set[int], set[int]] = (set(), set())
        self.est_sent: set[int] = set()
        self.bin_values: set[int] = set()
        self.first_bin: Optional[int] = None
        self.aux_from: dict[int, frozenset[int]] = {}
        self.coord_value: Optional[int] = None
        self.coord_sent = False
        self.timer_expired = False
        self.aux_sent = False

    def clone(self) -> "_Round":
        c = _Round.__new__(_Round)
        c.est_from = (set(self.est_from[0]), set(self.est_from[1]))
        c.est_sent = set(self.est_sent)
        c.bin_values = set(self.bin_values)
        c.first_bin = self.first_bin
        c.aux_from = dict(self.aux_from)
        c.coord_value = self.coord_value
        c.coord_sent = self.coord_sent
        c.timer_expired = self.timer_expired
        c.aux_sent = self.aux_sent
        return c

    def snapshot(self) -> tuple:
        return (
            frozenset(self.est_from[0]), frozenset(self.est_from[1]), frozenset(self.est_sent),
            frozenset(self.bin_values), self.first_bin, frozenset(self.aux_from.items()),
            self.coord_value, self.coord_sent, self.timer_expired, self.aux_sent,
        )


class BinaryConsensus:
    """One binary consensus instance as seen by node ``me``.

    ``timeout_base`` is the first round's timer; it doubles every round.
    ``max_round`` optionally bounds participation (used by exploration).
    """

    def __init__(self, index: int, slot: int, me: int, n: int, f: int,
                 timeout_base: int = 100, max_round: Optional[int] = None):
        self.index = index
        self.slot = slot
        self.me = me
        self.n = n
        self.f = f
        self.timeout_base = timeout_base
        self.max_round = max_round
        self.round = 0
        self.est: Optional[int] = None
        self.proposal: Optional[int] = None
        self.decided: Optional[int] = None
        self.decided_round: Optional[int] = None
        self.halted = False
        self.rounds: dict[int, _Round] = {}
        self.dropped = 0
        self._snap: Optional[tuple] = None

    @property
    def slot_key(self) -> tuple[int, int]:
        return (self.index, self.slot)

    def coordinator(self, r: int) -> int:
        return r % self.n

    def bin_values(self, r: Optional[int] = None) -> set[int]:
        return self._r(self.round if r is None else r).bin_values

    def _r(self, r: int) -> _Round:
        st = self.rounds.get(r)
        if st is None:
            st = self.rounds[r] = _Round()
        return st

    def _all(self, kind: MsgType, r: int, value: int) -> list[Output]:
        msg = BcMessage(kind, self.index, self.slot, self.me, r, value)
        return [(dst, msg) for dst in range(self.n)]

    # -- entry points --------------------------------------------------------

    def propose(self, bit: int) -> list[Output]:
        if bit not in (0, 1):
            raise ContractViolation(f"binary proposal must be 0 or 1, got {bit!r}")
        if self.proposal is not None:
            if self.proposal != bit:
                raise ContractViolation(f"slot {self.slot_key} already proposed {self.proposal}")
            return []
        self.proposal = bit
        self.est = bit
        self._snap = None
        out: list[Output] = []
        self._enter_round(1, out)
        self._progress(out)
        return out

    def handle(self, msg: BcMessage) -> list[Output]:
        if self.halted:
            return []
        self._snap = None
        out: list[Output] = []
        r = msg.round
        if r < 1 or (self.max_round is not None and r > self.max_round):
            self.dropped += 1
            return out
        kind = msg.kind
        if kind == MsgType.EST:
            if msg.value not in (0, 1):
                self.dropped += 1
                return out
            st = self._r(r)
            senders = st.est_from[msg.value]
            if msg.sender in senders:
                return out
            senders.add(msg.sender)
            if len(senders) >= self.f + 1 and msg.value not in st.est_sent:
                st.est_sent.add(msg.value)
                out += self._all(MsgType.EST, r, msg.value)
            if len(senders) >= 2 * self.f + 1 and msg.value not in st.bin_values:
                st.bin_values.add(msg.value)
                if st.first_bin is None:
                    st.first_bin = msg.value
        elif kind == MsgType.AUX:
            values = mask_to_set(msg.value)
            if not values or msg.value > 3:
                self.dropped += 1
                return out
            st = self._r(r)
            if msg.sender in st.aux_from:
                return out
            st.aux_from[msg.sender] = values
        elif kind == MsgType.COORD:
            if msg.value not in (0, 1) or msg.sender != self.coordinator(r):
                self.dropped += 1
                return out
            st = self._r(r)
            if st.coord_value is None:
                st.coord_value = msg.value
        else:
            self.dropped += 1
            return out
        if self.proposal is not None:
            self._progress(out)
        return out

    def on_timeout(self, r: int) -> list[Output]:
        out: list[Output] = []
        if self.halted or self.proposal is None:
            return out
        self._snap = None
        self._r(r).timer_expired = True
        if r == self.round:
            self._progress(out)
        return out

    # -- round machinery -----------------------------------------------------

    def _enter_round(self, r: int, out: list[Output]) -> None:
        self.round = r
        st = self._r(r)
        out.append(TimerRequest(self.slot_key, r, self.timeout_base * (1 << min(r - 1, 30))))
        if self.est not in st.est_sent:
            st.est_sent.add(self.est)
            out += self._all(MsgType.EST, r, self.est)

    def _progress(self, out: list[Output]) -> None:
        while not self.halted:
            r = self.round
            st = self._r(r)
            if not st.bin_values:
                return
            if self.coordinator(r) == self.me and not st.coord_sent:
                st.coord_sent = True
                out += self._all(MsgType.COORD, r, st.first_bin)
            if not st.aux_sent:
                w = st.coord_value
                if w is not None and w in st.bin_values:
                    aux = {w}
                elif st.timer_expired:
                    aux = set(st.bin_values)
                else:
                    return
                st.aux_sent = True
                out += self._all(MsgType.AUX, r, set_to_mask(aux))
            support = [v for v in st.aux_from.values() if v <= st.bin_values]
            if len(support) < self.n - self.f:
                return
            values = frozenset().union(*support)
            parity = r % 2
            if len(values) == 1:
                (v,) = values
                self.est = v
                if v == parity and self.decided is None:
                    self.decided = v
                    self.decided_round = r
            else:
                self.est = parity
            if self.decided is not None and r >= self.decided_round + 2:
                self.halted = True
                return
            if self.max_round is not None and r >= self.max_round:
                self.halted = True
                return
            self._enter_round(r + 1, out)

    # -- exploration support -------------------------------------------------

    def clone(self) -> "BinaryConsensus":
        c = BinaryConsensus.__new__(BinaryConsensus)
        c.__dict__.update(self.__dict__)
        c.rounds = {r: st.clone() for r, st in self.rounds.items()}
        return c

    def snapshot(self) -> tuple:
        if self._snap is None:
            self._snap = (
                self.round, self.est, self.proposal, self.decided, self.halted,
                tuple(sorted((r, st.snapshot()) for r, st in self.rounds.items())),
            )
        return self._snap
