"""CSV and plot output for completed runs."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence, Union

from ..state_node import PER_BLOCK, WHOLE_SUPERBLOCK
from .metrics import CSV_COLUMNS, RunMetrics
from .network import SimConfig, run_simulation


class ReportError(OSError):
    pass


def write_csv(runs: Iterable[RunMetrics], path: Union[str, Path], extra: Sequence[str] = ()) -> Path:
    """One row per run; ``extra`` names additional RunMetrics attributes to append."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(CSV_COLUMNS) + list(extra))
            for m in runs:
                row = m.row()
                w.writerow([row[c] for c in CSV_COLUMNS] + [getattr(m, e) for e in extra])
    except OSError as e:
        raise ReportError(f"cannot write report to {path}: {e}") from e
    return path


def read_csv(path: Union[str, Path]) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def compare_modes(cfg: SimConfig, workload, path: Union[str, Path, None] = None) -> list[RunMetrics]:
    """Run the same workload with per-block and whole-superblock persistence."""
    runs = []
    for mode in (PER_BLOCK, WHOLE_SUPERBLOCK):
        res = run_simulation(replace(cfg, persist_mode=mode, run_id=f"{cfg.run_id or 'cmp'}-{mode}"), workload)
        if res.violation is not None:
            raise res.violation
        m = res.metrics
        m.mode = mode
        runs.append(m)
    if path is not None:
        write_csv(runs, path, extra=("mode", "state_digest"))
    return runs


def plot_throughput(runs: Sequence[RunMetrics], path: Union[str, Path]) -> Path:
    """Committed transactions per second over simulated time, one line per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for m in runs:
        ax.plot(range(len(m.throughput)), m.throughput, label=m.run_id)
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("committed tx/s")
    if runs:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    try:
        fig.savefig(path)
    except OSError as e:
        raise ReportError(f"cannot write plot to {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def plot_scaling(runs: Sequence[RunMetrics], path: Union[str, Path]) -> Path:
    """Throughput and median latency against n."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = sorted(runs, key=lambda m: m.n)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([m.n for m in runs], [m.tps_mean for m in runs], marker="o", label="tx/s")
    ax2 = ax.twinx()
    ax2.plot([m.n for m in runs], [m.p50 for m in runs], marker="s", color="tab:red", label="p50 latency (s)")
    ax.set_xlabel("n")
    ax.set_ylabel("tx/s")
    ax2.set_ylabel("p50 latency (s)")
    fig.tight_layout()
    path = Path(path)
    try:
        fig.savefig(path)
    except OSError as e:
        raise ReportError(f"cannot write plot to {path}: {e}") from e
    finally:
        plt.close(fig)
    return path
