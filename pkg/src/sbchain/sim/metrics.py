"""Run metrics: per-transaction bookkeeping reduced to the reported figures."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CSV_COLUMNS = (
    "run_id", "seed", "n", "f", "submitted", "committed", "dropped",
    "tps_mean", "p50", "p90", "p99", "superblock_mean_blocks",
)


@dataclass
class RunMetrics:
    run_id: str
    seed: int
    n: int
    f: int
    submitted: int = 0
    committed: int = 0
    dropped: int = 0
    pending: int = 0
    drop_reasons: Counter = field(default_factory=Counter)
    throughput: list[int] = field(default_factory=list)
    tps_mean: float = 0.0
    p50: float = 0.0
    p90: float = 0.0
    p99: float = 0.0
    eager: list[int] = field(default_factory=list)
    lazy: list[int] = field(default_factory=list)
    superblock_sizes: list[int] = field(default_factory=list)
    message_counts: dict[str, int] = field(default_factory=dict)
    max_instance_lag: int = 0
    uncommitted_pooled: int = 0
    state_digest: str = ""
    trace_digest: str = ""
    events: int = 0
    sim_time: int = 0
    instances: int = 0
    mode: str = ""

    @property
    def superblock_mean_blocks(self) -> float:
        return float(np.mean(self.superblock_sizes)) if self.superblock_sizes else 0.0

    def row(self) -> dict:
        return {
            "run_id": self.run_id, "seed": self.seed, "n": self.n, "f": self.f,
            "submitted": self.submitted, "committed": self.committed, "dropped": self.dropped,
            "tps_mean": round(self.tps_mean, 6), "p50": round(self.p50, 6), "p90": round(self.p90, 6),
            "p99": round(self.p99, 6), "superblock_mean_blocks": round(self.superblock_mean_blocks, 6),
        }


class _TxTrack:
    __slots__ = ("first_submit", "submissions", "eager_drops", "pooled_at", "commit_time", "commit_index",
                 "lazy_rejected")

    def __init__(self, t: int):
        self.first_submit = t
        self.submissions = 0
        self.eager_drops = 0
        self.pooled_at: Optional[int] = None  # consensus index when first pooled
        self.commit_time: Optional[int] = None
        self.commit_index: Optional[int] = None
        self.lazy_rejected = False


class MetricsCollector:
    def __init__(self, bucket_ms: int = 1000):
        self.bucket_ms = bucket_ms
        self.txs: dict[bytes, _TxTrack] = {}
        self.drop_reasons: Counter = Counter()
        self.superblock_sizes: list[int] = []

    def on_submit(self, tx_id: bytes, t: int, reason: Optional[str], index: int) -> None:
        tr = self.txs.get(tx_id)
        if tr is None:
            tr = self.txs[tx_id] = _TxTrack(t)
        tr.submissions += 1
        if reason is not None:
            tr.eager_drops += 1
            self.drop_reasons[reason] += 1
        elif tr.pooled_at is None:
            tr.pooled_at = index

    def on_reference_commit(self, t: int, index: int, size: int, executed, rejected) -> None:
        self.superblock_sizes.append(size)
        for tx_id in executed:
            tr = self.txs.get(tx_id)
            if tr is not None and tr.commit_time is None:
                tr.commit_time, tr.commit_index = t, index
        for tx_id, reason in rejected:
            tr = self.txs.get(tx_id)
            if tr is not None and tr.commit_time is None and not tr.lazy_rejected:
                tr.lazy_rejected = True
                self.drop_reasons[reason] += 1

    def finish(self, m: RunMetrics, min_committed_index: int) -> RunMetrics:
        latencies = []
        commit_times = []
        lag = 0
        uncommitted = 0
        for tr in self.txs.values():
            m.submitted += 1
            if tr.commit_time is not None and tr.commit_index <= min_committed_index:
                m.committed += 1
                latencies.append((tr.commit_time - tr.first_submit) / 1000.0)
                commit_times.append(tr.commit_time)
                if tr.pooled_at is not None:
                    lag = max(lag, tr.commit_index - tr.pooled_at)
            elif tr.eager_drops == tr.submissions or tr.lazy_rejected:
                m.dropped += 1
            else:
                m.pending += 1
                if tr.pooled_at is not None:
                    uncommitted += 1
        m.drop_reasons = Counter(self.drop_reasons)
        m.superblock_sizes = list(self.superblock_sizes)
        m.max_instance_lag = lag
        m.uncommitted_pooled = uncommitted
        if latencies:
            m.p50, m.p90, m.p99 = (float(x) for x in np.percentile(latencies, [50, 90, 99]))
        if commit_times:
            last = max(commit_times)
            buckets = np.bincount(np.asarray(commit_times) // self.bucket_ms)
            m.throughput = [int(x) for x in buckets]
            span = max(last, 1) / 1000.0
            m.tps_mean = m.committed / span
        return m
