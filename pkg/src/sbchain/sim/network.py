"""Deterministic discrete-event simulation of a group of nodes.

Time is an integer number of milliseconds. Every random choice comes from one
seeded ``random.Random``; ties in the event queue are broken by insertion
order, so a config and a workload fully determine the trace.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..binary_consensus import BcMessage, decode_bc, encode_bc
from ..core import ChainConfig, ContractViolation
from ..execution import WorldState
from ..node import ChainNode
from ..reliable_broadcast import RbMessage, decode_rb, encode_rb
from ..state_node import PER_BLOCK, NoQuorum, ReadResponse, secure_read
from .adversary import Adversary
from .metrics import MetricsCollector, RunMetrics
from .monitor import SafetyMonitor, SafetyViolation
from .workload import WorkloadItem, genesis_balances

log = logging.getLogger(__name__)

SUBMIT, DELIVER, TIMER, COMMIT_DONE, FLUSH, READ = range(6)
_EVENT_NAMES = ("submit", "deliver", "timer", "commit", "flush", "read")


@dataclass
class DelayModel:
    """Uniform (or fixed) delays before GST, at most ``delta`` after it.

    A message sent before GST still arrives by ``GST + delta``. ``gst=None``
    means the network never stabilizes.
    """

    min_delay: int = 1
    max_delay: int = 40
    distribution: str = "uniform"
    delta: int = 10
    gst: Optional[int] = 0

    def __post_init__(self):
        if not 0 <= self.min_delay <= self.max_delay or self.delta < 1:
            raise ValueError("need 0 <= min_delay <= max_delay and delta >= 1")
        if self.distribution not in ("uniform", "fixed"):
            raise ValueError(f"unknown delay distribution {self.distribution!r}")

    def sample(self, rng: random.Random, now: int, worst: bool = False) -> int:
        if self.gst is not None and now >= self.gst:
            lo = min(self.min_delay, self.delta)
            if worst or self.distribution == "fixed":
                return self.delta
            return rng.randint(lo, self.delta)
        if worst or self.distribution == "fixed":
            d = self.max_delay
        else:
            d = rng.randint(self.min_delay, self.max_delay)
        if self.gst is not None:
            d = min(d, self.gst - now + self.delta)
        return d


@dataclass
class SimConfig:
    seed: int = 0
    n: int = 4
    f: int = 1
    endpoints: Optional[list[str]] = None
    delay: DelayModel = field(default_factory=DelayModel)
    adversaries: dict[int, str] = field(default_factory=dict)
    duration: int = 60_000
    max_events: int = 5_000_000
    timeout_base: int = 100
    proposal_threshold: int = 10
    pool_capacity: int = 10_000
    max_queued_blocks: int = 1
    persist_mode: str = PER_BLOCK
    flush_interval: Optional[int] = None
    exec_cost_per_tx: int = 0
    persist_cost: int = 0
    timestamp_granularity: int = 1000
    submit_to: str = "correct"
    fanout: int = 1
    read_interval: Optional[int] = None
    check_wire: bool = False
    monitor: bool = True
    keep_trace: bool = False
    stop_when_idle: bool = True
    groups: int = 1
    run_id: str = ""

    def __post_init__(self):
        if self.n < 3 * self.f + 1 or self.f < 0:
            raise ValueError(f"need n > 3f, got n={self.n} f={self.f}")
        if len(self.adversaries) > self.f:
            raise ValueError(f"{len(self.adversaries)} adversaries exceed f={self.f}")
        if any(not 0 <= i < self.n for i in self.adversaries):
            raise ValueError("adversary ids must be node ids")
        if self.endpoints is not None and len(self.endpoints) != self.n:
            raise ValueError("one endpoint per node")
        if self.submit_to not in ("correct", "all"):
            raise ValueError("submit_to is 'correct' or 'all'")
        if self.groups < 1 or self.fanout < 1:
            raise ValueError("groups and fanout must be >= 1")

    def chain_config(self) -> ChainConfig:
        return ChainConfig(n=self.n, f=self.f, proposal_threshold=self.proposal_threshold,
                           pool_capacity=self.pool_capacity)


@dataclass
class SimResult:
    metrics: RunMetrics
    trace_digest: str
    trace: list
    superblocks: dict[int, list]  # node -> list of superblock digests (hex)
    violation: Optional[SafetyViolation] = None


def _msg_brief(msg) -> tuple:
    if isinstance(msg, RbMessage):
        return (int(msg.kind), msg.index, msg.broadcaster, msg.sender, msg.digest[:8].hex())
    return (int(msg.kind), msg.index, msg.slot, msg.sender, msg.round, msg.value)


class Simulation:
    """``groups`` independent node groups of size ``n`` share one event loop.

    Node ``g * n + i`` is node ``i`` of group ``g``; groups never address each
    other, which the message-edge audit can confirm.
    """

    def __init__(self, cfg: SimConfig, workload: Sequence[WorkloadItem] = (),
                 genesis: Optional[dict[str, int]] = None, contracts=None):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.chain_cfg = cfg.chain_config()
        balances = genesis if genesis is not None else genesis_balances(workload)
        self.genesis = WorldState.genesis(balances)
        self.contracts = contracts
        n = cfg.n
        self.nodes: list[ChainNode] = []
        self.adversary: dict[int, Adversary] = {}
        for g in range(cfg.groups):
            for i in range(n):
                gid = g * n + i
                self.nodes.append(ChainNode(i, self.chain_cfg, self.genesis, cfg.timeout_base,
                                            cfg.max_queued_blocks, cfg.persist_mode, contracts))
                if i in cfg.adversaries:
                    self.adversary[gid] = Adversary(cfg.adversaries[i], gid, random.Random(cfg.seed * 7919 + gid))
        self.correct = [gid for gid in range(len(self.nodes)) if gid not in self.adversary]
        self.monitors = [SafetyMonitor(self.chain_cfg, self.genesis, contracts, keep_snapshots=cfg.read_interval is not None)
                         for _ in range(cfg.groups)] if cfg.monitor else []
        self.heap: list = []
        self.seq = 0
        self.now = 0
        self.events = 0
        self.in_flight = 0
        self.workload = list(workload)
        self.unsubmitted = len(self.workload)
        self.message_counts: Counter = Counter()
        self.edges: set[tuple[int, int]] = set()
        self.trace_hash = hashlib.sha256()
        self.trace: list = []
        self.recent: deque = deque(maxlen=400)
        self.metrics = [MetricsCollector() for _ in range(cfg.groups)]
        self.superblock_log: dict[int, list[str]] = {gid: [] for gid in range(len(self.nodes))}
        self.read_stats = Counter()
        self._sender_slot: dict[str, int] = {}
        self._schedule_workload()
        if cfg.flush_interval:
            for gid in self.correct:
                self._push(cfg.flush_interval, FLUSH, gid, None)
        if cfg.read_interval:
            for g in range(cfg.groups):
                self._push(cfg.read_interval, READ, g, None)
        for gid, adv in self.adversary.items():
            block = adv.junk_block(1, 0)
            if block is not None:
                self._apply(gid, self.nodes[gid].enqueue_block(block))

    # -- scheduling --------------------------------------------------------

    def _push(self, t: int, kind: int, node: int, payload) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, node, payload))

    def _group_of(self, gid: int) -> int:
        return gid // self.cfg.n

    def _schedule_workload(self) -> None:
        n, groups = self.cfg.n, self.cfg.groups
        for item in self.workload:
            sender = item.tx.sender
            slot = self._sender_slot.setdefault(sender, len(self._sender_slot))
            g = slot % groups
            base = g * n
            pool = [base + i for i in range(n)]
            if self.cfg.submit_to == "correct":
                pool = [gid for gid in pool if gid not in self.adversary]
            k = min(self.cfg.fanout, len(pool))
            first = (slot // groups) % len(pool)
            targets = tuple(pool[(first + j) % len(pool)] for j in range(k))
            self._push(item.time, SUBMIT, targets[0], (item.tx, targets))

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimResult:
        violation = None
        try:
            while self.heap:
                t, _, kind, node, payload = heapq.heappop(self.heap)
                if t > self.cfg.duration or self.events >= self.cfg.max_events:
                    break
                self.now = t
                self.events += 1
                self._handle(kind, node, payload)
                if kind in (TIMER, FLUSH, READ) and self.cfg.stop_when_idle and self._idle():
                    break
        except SafetyViolation as v:
            v.trace = self._violation_trace(v)
            violation = v
        return self._result(violation)

    def _idle(self) -> bool:
        if self.in_flight or self.unsubmitted:
            return False
        for gid in self.correct:
            node = self.nodes[gid]
            if node.committing is not None or node.engine.commit_channel or node.engine.block_queue:
                return False
            if len(node.state.pool) and self.cfg.flush_interval:
                return False
        return True

    def _record(self, entry: tuple) -> None:
        self.trace_hash.update(repr(entry).encode())
        self.recent.append(entry)
        if self.cfg.keep_trace:
            self.trace.append(entry)

    def _handle(self, kind: int, gid: int, payload) -> None:
        node = self.nodes[gid]
        if kind == DELIVER:
            self.in_flight -= 1
            src, msg = payload
            self._record((self.now, "deliver", src, gid) + _msg_brief(msg))
            self._apply(gid, node.engine.receive(msg))
        elif kind == TIMER:
            adv = self.adversary.get(gid)
            if adv is not None and not adv.participates:
                return
            self._record((self.now, "timer", gid, payload.slot_key, payload.round))
            self._apply(gid, node.engine.on_timer(payload))
        elif kind == SUBMIT:
            self.unsubmitted -= 1
            tx, targets = payload
            self._record((self.now, "submit", targets, tx.tx_id[:8].hex()))
            collector = self.metrics[self._group_of(gid)]
            for target in targets:
                tnode = self.nodes[target]
                reason, fx = tnode.submit(tx, self._ts())
                collector.on_submit(tx.tx_id, self.now, reason, tnode.engine.index)
                self._apply(target, fx)
        elif kind == COMMIT_DONE:
            self._finish_commit(gid)
        elif kind == FLUSH:
            if node.state.pool and not node.engine.block_queue:
                self._apply(gid, node.maybe_propose(self._ts(), force=True))
            self._push(self.now + self.cfg.flush_interval, FLUSH, gid, None)
        elif kind == READ:
            self._light_client_read(gid)
            self._push(self.now + self.cfg.read_interval, READ, gid, None)

    def _ts(self) -> int:
        return self.now // self.cfg.timestamp_granularity

    def _apply(self, gid: int, fx) -> None:
        adv = self.adversary.get(gid)
        g = self._group_of(gid)
        base = g * self.cfg.n
        if adv is None or adv.participates:
            for sb in fx.superblocks:
                if adv is None and self.monitors:
                    self.monitors[g].on_superblock(gid, sb)
            for ev in fx.events:
                self._record((self.now, "event", gid) + ev[:3])
        for dst, msg in fx.sends:
            self._send(gid, base + dst, msg, adv)
        if adv is None or adv.participates:
            for req in fx.timers:
                self._push(self.now + req.delay, TIMER, gid, req)
        self._pump_commit(gid)

    def _send(self, src: int, dst: int, msg, adv: Optional[Adversary]) -> None:
        if msg.sender != src % self.cfg.n:
            raise ContractViolation("transport authenticity: sender field must be the source")
        msgs = adv.outbound(dst % self.cfg.n, msg) if adv is not None else (msg,)
        dst_adv = self.adversary.get(dst)
        for m in msgs:
            self.message_counts[m.kind.name] += 1
            if src != dst:
                self.edges.add((src, dst))
            if dst_adv is not None and not dst_adv.participates:
                continue
            if self.cfg.check_wire:
                m = self._wire_roundtrip(m)
            if src == dst:
                delay = 0
            else:
                worst = adv is not None and adv.delay_hint() == "max"
                delay = self.cfg.delay.sample(self.rng, self.now, worst)
            self.in_flight += 1
            self._push(self.now + delay, DELIVER, dst, (src, m))

    @staticmethod
    def _wire_roundtrip(m):
        if isinstance(m, RbMessage):
            back = decode_rb(encode_rb(m))
        else:
            back = decode_bc(encode_bc(m))
        if back != m:
            raise ContractViolation(f"wire encoding does not round-trip {m.kind.name}")
        return back

    # -- commit pipeline ---------------------------------------------------

    def _pump_commit(self, gid: int) -> None:
        node = self.nodes[gid]
        sb = node.next_superblock()
        if sb is None:
            return
        adv = self.adversary.get(gid)
        if adv is not None and not adv.participates:
            return
        ntx = sum(len(b.transactions) for b in sb.blocks)
        records = max(len(sb.blocks), 1) if self.cfg.persist_mode == PER_BLOCK else 1
        cost = self.cfg.exec_cost_per_tx * ntx + self.cfg.persist_cost * records
        self._push(self.now + cost, COMMIT_DONE, gid, None)

    def _finish_commit(self, gid: int) -> None:
        node = self.nodes[gid]
        sb = node.committing
        result = node.commit(sb)
        g = self._group_of(gid)
        self.superblock_log[gid].append(sb.digest.hex())
        self._record((self.now, "commit", gid, sb.index, len(sb.blocks)))
        if gid not in self.adversary:
            if self.monitors:
                mon = self.monitors[g]
                for rec in result.records:
                    mon.on_record(gid, rec)
                mon.on_commit(gid, node.state.state)
            if gid == self._reference(g):
                self.metrics[g].on_reference_commit(
                    self.now, sb.index, len(sb.blocks),
                    [o.tx_id for o in result.outcomes],
                    [(tx.tx_id, v.reason.value) for tx, v in result.rejected],
                )
        fx = node.finish_commit(self._ts())
        adv = self.adversary.get(gid)
        if adv is not None and not node.engine.block_queue:
            block = adv.junk_block(node.engine.index, self._ts())
            if block is not None:
                ChainNode._merge(fx, node.enqueue_block(block))
        self._apply(gid, fx)

    def _reference(self, g: int) -> int:
        base = g * self.cfg.n
        return next(gid for gid in self.correct if gid >= base)

    # -- light client ------------------------------------------------------

    def _light_client_read(self, g: int) -> None:
        n, f = self.cfg.n, self.cfg.f
        base = g * n
        accounts = sorted(self.genesis.accounts) or ["nobody"]
        key = accounts[self.rng.randrange(len(accounts))]
        chosen = self.rng.sample(range(base, base + n), 2 * f + 1)
        responders = [_Responder(gid % n, self.nodes[gid], self.adversary.get(gid), self.rng) for gid in chosen]
        try:
            value = secure_read(key, responders, f)
        except NoQuorum:
            self.read_stats["no_quorum"] += 1
            return
        self.read_stats["ok"] += 1
        self._record((self.now, "read", key, repr(value)))
        if self.monitors:
            self.monitors[g].on_read(key, value)

    # -- results -----------------------------------------------------------

    def _violation_trace(self, v: SafetyViolation) -> list:
        """Recent trace entries, minimized to the events that mention an index or commit."""
        entries = list(self.recent)
        keep = [e for e in entries if e[1] in ("commit", "event")]
        return keep or entries

    def _result(self, violation) -> SimResult:
        cfg = self.cfg
        total = RunMetrics(cfg.run_id or f"seed{cfg.seed}", cfg.seed, cfg.n, cfg.f)
        for g, collector in enumerate(self.metrics):
            members = [gid for gid in self.correct if self._group_of(gid) == g]
            low = min(self.nodes[gid].state.committed_index for gid in members)
            m = collector.finish(RunMetrics("", cfg.seed, cfg.n, cfg.f), low)
            total.submitted += m.submitted
            total.committed += m.committed
            total.dropped += m.dropped
            total.pending += m.pending
            total.drop_reasons.update(m.drop_reasons)
            total.superblock_sizes += m.superblock_sizes
            total.max_instance_lag = max(total.max_instance_lag, m.max_instance_lag)
            total.uncommitted_pooled += m.uncommitted_pooled
            if g == 0:
                total.p50, total.p90, total.p99 = m.p50, m.p90, m.p99
                total.throughput = m.throughput
            total.tps_mean += m.tps_mean
        ref = self.nodes[self._reference(0)]
        total.instances = ref.state.committed_index
        total.state_digest = ref.state.state.state_digest.hex()
        total.eager = [nd.state.counters.eager for nd in self.nodes]
        total.lazy = [nd.state.counters.lazy for nd in self.nodes]
        total.message_counts = dict(sorted(self.message_counts.items()))
        total.trace_digest = self.trace_hash.hexdigest()
        total.events = self.events
        total.sim_time = self.now
        return SimResult(total, total.trace_digest, self.trace, self.superblock_log, violation)


class _Responder:
    """Answers light-client reads; byzantine responders answer with forgeries."""

    def __init__(self, node_id: int, node: ChainNode, adv: Optional[Adversary], rng: random.Random):
        self.node_id = node_id
        self.node = node
        self.adv = adv
        self.rng = rng

    def read(self, key):
        if self.adv is None:
            return self.node.state.read(key)
        if self.adv.kind == "silent":
            return None
        honest = self.node.state.read(key)
        forged = (10 ** 12 + self.rng.randrange(3), self.rng.randrange(3))
        return ReadResponse(honest.height, honest.state_digest, forged, self.node_id)


def run_simulation(cfg: SimConfig, workload: Sequence[WorkloadItem] = (), genesis=None,
                   contracts=None) -> SimResult:
    return Simulation(cfg, workload, genesis, contracts).run()
