"""Timestamped transaction streams for the simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

from ..core import Transaction, canonical_decode, make_transaction

# Full-scale burst peak, in transactions per second, and tweet length.
TWITTER_PEAK_TPS = 143_000
MESSAGE_BYTES = 140


@dataclass(frozen=True)
class WorkloadItem:
    time: int  # simulated milliseconds
    tx: Transaction


class _Accounts:
    def __init__(self, count: int, prefix: str = "acct"):
        self.names = [f"{prefix}{i}" for i in range(count)]
        self.nonces = [0] * count

    def next(self, i: int) -> tuple[str, int]:
        k = i % len(self.names)
        nonce = self.nonces[k]
        self.nonces[k] += 1
        return self.names[k], nonce


def constant_rate(rate: float, duration: float, accounts: int = 16, amount: int = 1,
                  start: int = 0) -> list[WorkloadItem]:
    """``rate`` transfers per second for ``duration`` seconds, evenly spaced."""
    if rate <= 0 or duration < 0:
        raise ValueError("rate must be positive and duration non-negative")
    count = int(round(rate * duration))
    accts = _Accounts(accounts)
    out = []
    for i in range(count):
        sender, nonce = accts.next(i)
        recipient = accts.names[(i + 1) % len(accts.names)]
        tx = make_transaction(sender, nonce, recipient=recipient, amount=amount)
        out.append(WorkloadItem(start + int(i * 1000 / rate), tx))
    return out


def burst_profile(scale: float, duration: int = 60, spike_at: int = 20,
                  base_fraction: float = 1 / 40, decay: float = 1.5) -> list[int]:
    """Per-second rates: a flat baseline and a one-second spike with a decaying tail.

    The spike reaches ``TWITTER_PEAK_TPS * scale``; the baseline is
    ``base_fraction`` of the peak.
    """
    if duration <= 0:
        return []
    peak = TWITTER_PEAK_TPS * scale
    base = peak * base_fraction
    rates = []
    for s in range(duration):
        if s < spike_at:
            r = base
        else:
            r = base + (peak - base) * math.exp(-(s - spike_at) * decay)
        rates.append(max(0, int(round(r))))
    return rates


def twitter_burst(scale: float = 0.01, duration: int = 60, accounts: int = 64,
                  spike_at: int = 20) -> list[WorkloadItem]:
    """Message posts (140 bytes, no recipient) following :func:`burst_profile`."""
    rates = burst_profile(scale, duration, min(spike_at, max(duration - 1, 0)))
    accts = _Accounts(accounts, "user")
    out = []
    i = 0
    for second, rate in enumerate(rates):
        for k in range(rate):
            sender, nonce = accts.next(i)
            body = f"{sender}:{nonce}:".encode().ljust(MESSAGE_BYTES, b".")[:MESSAGE_BYTES]
            tx = make_transaction(sender, nonce, payload=body)
            out.append(WorkloadItem(second * 1000 + (k * 1000) // rate, tx))
            i += 1
    return out


def save(items: Iterable[WorkloadItem], path: Union[str, Path]) -> None:
    """One line per item: ``<time ms> <hex canonical transaction>``."""
    with Path(path).open("w") as fh:
        for it in items:
            fh.write(f"{it.time} {it.tx.encoded.hex()}\n")


def replay(path: Union[str, Path]) -> list[WorkloadItem]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        t, raw = line.split()
        tx = canonical_decode(bytes.fromhex(raw))
        if not isinstance(tx, Transaction):
            raise ValueError("replay file holds a non-transaction")
        out.append(WorkloadItem(int(t), tx))
    out.sort(key=lambda it: it.time)
    return out


def genesis_balances(items: Iterable[WorkloadItem], per_account: int = 10 ** 9) -> dict[str, int]:
    """Fund every sender in ``items`` generously."""
    return {name: per_account for name in sorted({it.tx.sender for it in items})}


def peak_to_mean(items: list[WorkloadItem]) -> float:
    """Ratio of the busiest one-second bucket to the mean per-second rate."""
    if not items:
        return 0.0
    buckets: dict[int, int] = {}
    for it in items:
        buckets[it.time // 1000] = buckets.get(it.time // 1000, 0) + 1
    span = max(buckets) + 1
    return max(buckets.values()) / (len(items) / span)


def generate_workload(kind: str, **kw) -> list[WorkloadItem]:
    if kind == "constant_rate":
        return constant_rate(**kw)
    if kind == "twitter_burst":
        return twitter_burst(**kw)
    if kind == "replay":
        return replay(**kw)
    raise ValueError(f"unknown workload kind {kind!r}")
