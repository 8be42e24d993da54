"""Command line entry point: run, bench, explore, analyze-slowdown, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, build_workload, load_config
from .explore import BcWorld, PropertyViolation, RbWorld, explore
from .network import DelayModel, SimConfig, run_simulation
from .report import compare_modes, plot_scaling, plot_throughput, write_csv
from .slowdown import slowdown_model
from .workload import constant_rate

EXIT_VIOLATION = 2
EXIT_USAGE = 64


def _summary(m) -> dict:
    row = m.row()
    row.update(pending=m.pending, drop_reasons=dict(m.drop_reasons), instances=m.instances,
               messages=sum(m.message_counts.values()), state_digest=m.state_digest,
               trace_digest=m.trace_digest)
    return row


def cmd_run(args) -> int:
    cfg, wspec = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, keep_trace=bool(args.trace))
    res = run_simulation(cfg, build_workload(wspec))
    print(json.dumps(_summary(res.metrics), indent=2, default=str))
    if args.csv:
        write_csv([res.metrics], args.csv)
    if args.trace:
        Path(args.trace).write_text("\n".join(repr(e) for e in res.trace) + "\n")
    if res.violation is not None:
        print(f"SAFETY VIOLATION: {res.violation.what}", file=sys.stderr)
        for e in res.violation.trace[-20:]:
            print(f"  {e!r}", file=sys.stderr)
        return EXIT_VIOLATION
    return 0


def cmd_bench(args) -> int:
    runs = []
    status = 0
    for n in args.n:
        f = (n - 1) // 3
        advs = {n - 1 - i: args.adversary for i in range(f)} if args.adversary else {}
        for seed in range(args.seeds):
            cfg = SimConfig(seed=seed, n=n, f=f, adversaries=advs, proposal_threshold=args.threshold,
                            delay=DelayModel(args.min_delay, args.max_delay, "uniform", args.delta, args.gst),
                            flush_interval=args.flush, run_id=f"n{n}-s{seed}")
            wl = constant_rate(args.rate, args.duration, accounts=max(4 * n, 16))
            res = run_simulation(cfg, wl)
            if res.violation is not None:
                print(f"SAFETY VIOLATION in {cfg.run_id}: {res.violation.what}", file=sys.stderr)
                status = EXIT_VIOLATION
            runs.append(res.metrics)
            print(f"{cfg.run_id}: committed {res.metrics.committed}/{res.metrics.submitted} "
                  f"tps={res.metrics.tps_mean:.1f} p50={res.metrics.p50:.3f}s "
                  f"blocks/superblock={res.metrics.superblock_mean_blocks:.2f}")
    if args.csv:
        write_csv(runs, args.csv)
    if args.plot_dir:
        out = Path(args.plot_dir)
        out.mkdir(parents=True, exist_ok=True)
        plot_throughput(runs, out / "throughput.png")
        plot_scaling(runs, out / "scaling.png")
    return status


def cmd_explore(args) -> int:
    try:
        if args.protocol == "rb":
            world = RbWorld(byz_broadcaster=not args.correct_broadcaster, flip=args.flip)
        else:
            inputs = {i: int(b) for i, b in enumerate(args.inputs)}
            byz = {r: {d: (r + d) % 2 for d in inputs} for r in range(1, args.max_round + 1)} if args.byzantine else None
            world = BcWorld(inputs, byz_bits=byz, max_round=args.max_round)
        stats = explore(world, args.depth)
    except PropertyViolation as v:
        print(f"VIOLATION: {v} after {v.path}", file=sys.stderr)
        return EXIT_VIOLATION
    print(json.dumps({"states": stats.states, "transitions": stats.transitions, "leaves": stats.leaves,
                      "max_depth": stats.max_depth}, indent=2))
    return 0


def cmd_slowdown(args) -> int:
    s = slowdown_model(args.delta, args.Delta, args.n)
    print(json.dumps({k: round(v, 6) for k, v in s.as_dict().items()}, indent=2))
    print(f"slowdown {s.S:.1%}, limit {s.S_limit:.1%}")
    return 0


def cmd_report(args) -> int:
    cfg, wspec = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wl = build_workload(wspec)
    if args.compare_modes:
        runs = compare_modes(cfg, wl, out / "modes.csv")
    else:
        res = run_simulation(cfg, wl)
        if res.violation is not None:
            print(f"SAFETY VIOLATION: {res.violation.what}", file=sys.stderr)
            return EXIT_VIOLATION
        runs = [res.metrics]
        write_csv(runs, out / "runs.csv")
    if args.plot:
        plot_throughput(runs, out / "throughput.png")
    print(f"wrote {sorted(p.name for p in out.iterdir())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbchain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one simulation from a YAML config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--csv")
    r.add_argument("--trace", help="write the full event trace here")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="sweep n and seeds with a constant-rate workload")
    b.add_argument("--n", type=int, nargs="+", default=[4, 10])
    b.add_argument("--seeds", type=int, default=1)
    b.add_argument("--rate", type=float, default=200)
    b.add_argument("--duration", type=float, default=2)
    b.add_argument("--threshold", type=int, default=10)
    b.add_argument("--flush", type=int, default=500)
    b.add_argument("--min-delay", type=int, default=1)
    b.add_argument("--max-delay", type=int, default=40)
    b.add_argument("--delta", type=int, default=10)
    b.add_argument("--gst", type=int, default=0)
    b.add_argument("--adversary", choices=["silent", "equivocate_rb", "flood_invalid_tx", "delay_max", "flip_bits"])
    b.add_argument("--csv")
    b.add_argument("--plot-dir")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("explore", help="bounded exhaustive exploration, n=4 with one byzantine node")
    e.add_argument("--protocol", choices=["rb", "bc"], default="rb")
    e.add_argument("--depth", type=int, default=10)
    e.add_argument("--correct-broadcaster", action="store_true")
    e.add_argument("--flip", action="store_true")
    e.add_argument("--inputs", default="110", help="bits proposed by correct nodes 0..2")
    e.add_argument("--byzantine", action="store_true", help="inject byzantine binary consensus messages")
    e.add_argument("--max-round", type=int, default=4)
    e.set_defaults(func=cmd_explore)

    s = sub.add_parser("analyze-slowdown", help="slowdown of validating every transaction everywhere")
    s.add_argument("delta", type=float, help="eager validation time (s)")
    s.add_argument("Delta", type=float, help="end-to-end time (s)")
    s.add_argument("n", type=int)
    s.set_defaults(func=cmd_slowdown)

    rp = sub.add_parser("report", help="run a config and write CSV (and plots)")
    rp.add_argument("config")
    rp.add_argument("--out", default="report")
    rp.add_argument("--compare-modes", action="store_true")
    rp.add_argument("--plot", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
