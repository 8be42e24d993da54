"""Bounded exhaustive exploration of delivery orders for small protocol worlds.

A world holds the correct nodes' protocol instances and one FIFO queue per
(sender, receiver) channel, as with authenticated point-to-point links; the
scheduler chooses which channel delivers next. Byzantine messages are
queued up front on the byzantine node's channels, so they can surface at any
point of the interleaving. Messages a node sends to itself are handled
immediately, messages to byzantine nodes are dropped, and round timers are
ordinary transitions.

Search is a depth-first walk over transitions with sleep sets (deliveries to
different nodes commute) and state caching. Every state reached is checked;
every leaf at the depth bound is then completed with a FIFO run so that the
explored prefixes are also checked to the end.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..binary_consensus import BcMessage, BinaryConsensus
from ..core import Block, make_transaction
from ..reliable_broadcast import MsgType, RbInstance, RbMessage


class PropertyViolation(AssertionError):
    def __init__(self, what: str, path: list):
        super().__init__(what)
        self.path = path


# -- worlds ------------------------------------------------------------------


class _World:
    """Shared machinery; subclasses define ``_deliver``, ``check`` and keys."""

    n: int
    correct: tuple[int, ...]

    def __init__(self):
        # channel -> (messages, their keys); tuples, so clones share them
        self.channels: dict[tuple[int, int], tuple[tuple, tuple]] = {}

    def _enqueue(self, src: int, dst: int, msg) -> None:
        q = self.channels.get((src, dst))
        if q is None:
            self.channels[(src, dst)] = ((msg,), (_msg_key(msg),))
            # Keep the dict ordered by channel so iteration order is canonical.
            self.channels = dict(sorted(self.channels.items()))
        else:
            self.channels[(src, dst)] = (q[0] + (msg,), q[1] + (_msg_key(msg),))

    def _route(self, src: int, sends) -> None:
        queue = list(sends)
        while queue:
            dst, msg = queue.pop(0)
            if dst not in self.correct:
                continue
            if dst == src:
                queue += self._deliver(dst, msg)
            else:
                self._enqueue(src, dst, msg)

    def transitions(self) -> list[tuple]:
        out = [("m", dst, src) for (src, dst), q in self.channels.items() if q[0]]
        return out + self._timer_transitions()

    def _timer_transitions(self) -> list[tuple]:
        return []

    def step(self, t: tuple) -> None:
        if t[0] == "m":
            _, dst, src = t
            msgs, keys = self.channels[(src, dst)]
            msg = msgs[0]
            self.channels[(src, dst)] = (msgs[1:], keys[1:])
            self._route(dst, self._deliver(dst, msg))
        else:
            self._fire_timer(t)

    def _fire_timer(self, t: tuple) -> None:
        raise NotImplementedError

    def _copy_channels(self) -> dict:
        return dict(self.channels)

    @staticmethod
    def actor(t: tuple) -> int:
        return t[1]

    def key(self) -> tuple:
        chans = tuple((k, q[1]) for k, q in self.channels.items() if q[0])
        return (self._node_key(), chans)

    def run_fifo(self, check: Callable[["_World"], None], limit: int = 100_000,
                 stop: Optional[Callable[["_World"], bool]] = None) -> None:
        """Deliver the oldest channel head first; timers only when no message is queued."""
        steps = 0
        while steps < limit:
            if stop is not None and stop(self):
                return
            ts = self.transitions()
            if not ts:
                return
            msgs = [t for t in ts if t[0] == "m"]
            self.step(msgs[0] if msgs else ts[0])
            check(self)
            steps += 1
        raise PropertyViolation("FIFO completion did not quiesce", [])


def _msg_key(m) -> tuple:
    if isinstance(m, RbMessage):
        return (m.kind, m.broadcaster, m.sender, m.digest)
    return (m.kind, m.sender, m.round, m.value)


class RbWorld(_World):
    """One broadcast instance among ``n`` nodes; node ``byz`` is the broadcaster
    when ``byz_broadcaster`` is set (it equivocates), otherwise node 0 is a
    correct broadcaster and ``byz`` only sends conflicting echoes and readies.

    ``flip`` makes the byzantine node back the value it did not send a peer;
    ``both`` makes it back both values, in order.
    """

    def __init__(self, n: int = 4, f: int = 1, byz: int = 3, byz_broadcaster: bool = True,
                 flip: bool = False, both: bool = True):
        super().__init__()
        self.n, self.f = n, f
        self.correct = tuple(i for i in range(n) if i != byz)
        self.broadcaster = byz if byz_broadcaster else 0
        self.nodes = {i: RbInstance(1, self.broadcaster, n, f) for i in self.correct}
        self.delivered: dict[int, bytes] = {}
        v1 = Block(self.broadcaster, (make_transaction("a", 0, "b", 1),), 0)
        v2 = Block(self.broadcaster, (make_transaction("a", 0, "b", 2),), 0)
        self.values = {v1.payload_digest, v2.payload_digest}
        self.honest_value = None
        half = self.n // 2
        if byz_broadcaster:
            for dst in self.correct:
                v = v1 if dst < half else v2
                self._enqueue(byz, dst, RbMessage(MsgType.INIT, 1, byz, byz, v.payload_digest, v))
        else:
            self.honest_value = v1.payload_digest
            self._route(0, self.nodes[0].broadcast(0, v1))
        # The byzantine node backs the value it gave each peer, and pushes the
        # other value to the rest, with echoes, readies and payload supplies.
        for dst in self.correct:
            first, second = (v1, v2) if (dst < half) != flip else (v2, v1)
            for v in (first, second) if both else (first,):
                for kind in (MsgType.ECHO, MsgType.READY):
                    self._enqueue(byz, dst, RbMessage(kind, 1, self.broadcaster, byz, v.payload_digest))
                self._enqueue(byz, dst, RbMessage(MsgType.SUPPLY, 1, self.broadcaster, byz, v.payload_digest, v))

    def _deliver(self, dst: int, msg) -> list:
        sends, block = self.nodes[dst].handle(dst, msg)
        if block is not None:
            if dst in self.delivered:
                raise PropertyViolation(f"node {dst} delivered twice", [])
            self.delivered[dst] = block.payload_digest
        return sends

    def _node_key(self) -> tuple:
        return tuple(self.nodes[i].snapshot() for i in self.correct)

    def clone(self) -> "RbWorld":
        c = RbWorld.__new__(RbWorld)
        c.__dict__.update(self.__dict__)
        c.channels = self._copy_channels()
        c.nodes = {i: inst.clone() for i, inst in self.nodes.items()}
        c.delivered = dict(self.delivered)
        return c

    def check(self) -> None:
        vals = set(self.delivered.values())
        if len(vals) > 1:
            raise PropertyViolation(f"RB agreement: correct nodes delivered {len(vals)} values", [])
        if vals and not vals <= self.values:
            raise PropertyViolation("RB integrity: delivered a value nobody sent", [])
        if self.honest_value is not None and vals and vals != {self.honest_value}:
            raise PropertyViolation("RB integrity: correct broadcaster's value replaced", [])

    def check_final(self) -> None:
        """At quiescence: all correct nodes delivered, or none did (totality)."""
        if self.delivered and len(self.delivered) != len(self.correct):
            raise PropertyViolation("RB totality: only some correct nodes delivered", [])
        if self.honest_value is not None and len(self.delivered) != len(self.correct):
            raise PropertyViolation("RB validity: correct broadcaster not delivered", [])


class BcWorld(_World):
    """One binary consensus instance; ``byz_bits[r][dst]`` is the bit the
    byzantine node pushes to ``dst`` in round ``r`` (EST, AUX and, in its
    coordinator round, COORD)."""

    def __init__(self, inputs: dict[int, int], n: int = 4, f: int = 1, byz: int = 3,
                 byz_bits: Optional[dict[int, dict[int, int]]] = None, max_round: int = 4,
                 timeout_base: int = 1):
        super().__init__()
        self.n, self.f = n, f
        self.correct = tuple(sorted(inputs))
        self.inputs = dict(inputs)
        self.max_round = max_round
        self.nodes = {i: BinaryConsensus(1, 0, i, n, f, timeout_base, max_round) for i in self.correct}
        self.timers: set[tuple[int, int]] = set()
        self.decided: dict[int, int] = {}
        for r, per_dst in (byz_bits or {}).items():
            for dst, bit in per_dst.items():
                if dst not in self.correct:
                    continue
                self._enqueue(byz, dst, BcMessage(MsgType.EST, 1, 0, byz, r, bit))
                if r % n == byz:
                    self._enqueue(byz, dst, BcMessage(MsgType.COORD, 1, 0, byz, r, bit))
                self._enqueue(byz, dst, BcMessage(MsgType.AUX, 1, 0, byz, r, 1 << bit))
        for i in self.correct:
            self._route(i, self._outputs(i, self.nodes[i].propose(inputs[i])))

    def _outputs(self, i: int, outs) -> list:
        sends = []
        for o in outs:
            if isinstance(o, tuple):
                sends.append(o)
            else:
                self.timers.add((i, o.round))
        inst = self.nodes[i]
        if inst.decided is not None and i not in self.decided:
            self.decided[i] = inst.decided
        return sends

    def _deliver(self, dst: int, msg) -> list:
        return self._outputs(dst, self.nodes[dst].handle(msg))

    def _timer_transitions(self) -> list[tuple]:
        return [("t", i, r) for (i, r) in sorted(self.timers)
                if not self.nodes[i].halted and self.nodes[i].round == r]

    def _fire_timer(self, t: tuple) -> None:
        _, i, r = t
        self.timers.discard((i, r))
        self._route(i, self._outputs(i, self.nodes[i].on_timeout(r)))

    def _node_key(self) -> tuple:
        return (tuple(self.nodes[i].snapshot() for i in self.correct), tuple(sorted(self.timers)))

    def clone(self) -> "BcWorld":
        c = BcWorld.__new__(BcWorld)
        c.__dict__.update(self.__dict__)
        c.channels = self._copy_channels()
        c.nodes = {i: inst.clone() for i, inst in self.nodes.items()}
        c.timers = set(self.timers)
        c.decided = dict(self.decided)
        return c

    def check(self) -> None:
        vals = set(self.decided.values())
        if len(vals) > 1:
            raise PropertyViolation("BC agreement: correct nodes decided differently", [])
        if vals and not vals <= set(self.inputs.values()):
            raise PropertyViolation("BC validity: decided a bit no correct node proposed", [])

    def check_final(self) -> None:
        pass


# -- search ------------------------------------------------------------------


@dataclass
class ExploreStats:
    states: int = 0
    transitions: int = 0
    leaves: int = 0
    max_depth: int = 0
    cache_hits: int = 0
    outcomes: dict = field(default_factory=dict)


def explore(world, depth: int, complete: bool = True, max_states: Optional[int] = None) -> ExploreStats:
    """Exhaustively explore all delivery orders up to ``depth`` transitions."""
    stats = ExploreStats()
    cache: dict[tuple, list] = {}
    path: list = []

    completed: set = set()

    def finish(w) -> None:
        stats.leaves += 1
        if complete:
            # FIFO completion is deterministic, so a state already completed
            # once needs no second run.
            w = w.clone()
            walked = []

            def seen(x) -> bool:
                k = x.key()
                if k in completed:
                    return True
                walked.append(k)
                return False

            w.run_fifo(lambda x: x.check(), stop=seen)
            if not w.transitions():
                w.check_final()
            completed.update(walked)
        outcome = tuple(sorted(set(getattr(w, "decided", getattr(w, "delivered", {})).values())))
        stats.outcomes[outcome] = stats.outcomes.get(outcome, 0) + 1

    def visit(w, d: int, sleep: frozenset) -> None:
        if max_states is not None and stats.states >= max_states:
            return
        key = w.key()
        prev = cache.get(key)
        if prev is not None and any(pd >= d and ps <= sleep for pd, ps in prev):
            stats.cache_hits += 1
            return
        cache.setdefault(key, []).append((d, sleep))
        stats.states += 1
        stats.max_depth = max(stats.max_depth, len(path))
        try:
            w.check()
        except PropertyViolation as e:
            e.path = list(path)
            raise
        ts = w.transitions()
        if d == 0 or not ts:
            try:
                finish(w)
            except PropertyViolation as e:
                e.path = list(path)
                raise
            return
        done: list = []
        for t in ts:
            if t in sleep:
                continue
            child_sleep = frozenset(u for u in list(sleep) + done if _World.actor(u) != _World.actor(t))
            child = w.clone()
            child.step(t)
            stats.transitions += 1
            path.append(t)
            visit(child, d - 1, child_sleep)
            path.pop()
            done.append(t)

    visit(world, depth, frozenset())
    return stats


def random_runs(make_world: Callable[[random.Random], object], runs: int, seed: int = 0) -> ExploreStats:
    """Seeded random delivery orders, each run to quiescence."""
    stats = ExploreStats()
    rng = random.Random(seed)
    for _ in range(runs):
        w = make_world(rng)
        steps = 0
        while True:
            ts = w.transitions()
            if not ts:
                break
            msgs = [t for t in ts if t[0] == "m"]
            # Timers fire rarely, which models a slow, adversarial network.
            pick = rng.choice(msgs) if msgs and rng.random() < 0.95 else rng.choice(ts)
            w.step(pick)
            w.check()
            steps += 1
            if steps > 200_000:
                raise PropertyViolation("random run did not quiesce", [])
        w.check_final()
        stats.leaves += 1
        stats.transitions += steps
        outcome = tuple(sorted(set(getattr(w, "decided", getattr(w, "delivered", {})).values())))
        stats.outcomes[outcome] = stats.outcomes.get(outcome, 0) + 1
    return stats
