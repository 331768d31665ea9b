"""Command line entry point: ``shardsim run | bench-alloc | analyze-security | replay``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import apply_overrides, default_config, load_config
from .metrics import bench_allocation, format_summary, replay, run_experiment, write_bench
from .security import SecurityQuery, a_shard_failure_probability, failure_probability_exact
from .sim import SCENARIOS
from .workload import load_trace


def _config(args):
    if args.config:
        return load_config(args.config, args.set)
    return apply_overrides(default_config(), args.set)


def cmd_run(args) -> int:
    cfg = _config(args)
    trace = load_trace(args.trace, args.limit)
    report, _ = run_experiment(cfg, trace, args.epochs, args.scenario, args.out,
                               str(Path(args.trace).resolve()), args.dump_blocks)
    print(format_summary(report, args.scenario))
    print(f"metrics written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    trace = load_trace(args.trace)
    perf = [float(x) for x in args.tps.split(",")]
    sizes = [int(x) for x in args.sizes.split(",")] if args.sizes else [len(trace)]
    rows = []
    for n in sizes:
        rows += bench_allocation(trace[:n], len(perf), perf, beta=args.beta)
    print(f"{'algorithm':<16}{'txs':>9}{'max_time':>12}{'cross':>9}{'ms':>10}")
    for r in rows:
        print(f"{r.algorithm:<16}{r.tx_count:>9}{r.max_time:>12.3f}{r.cross_ratio:>9.4f}"
              f"{r.runtime_ms:>10.1f}")
    if args.out:
        write_bench(args.out, rows)
    return 0


def cmd_security(args) -> int:
    q = SecurityQuery(args.n, args.na, args.rho)
    exact = failure_probability_exact(q.n, q.n_a, q.malicious)
    print(f"n={q.n} n_A={q.n_a} malicious={q.malicious}")
    print(f"P[A-Shard fails] = {a_shard_failure_probability(q):.6e}  ({exact})")
    return 0


def cmd_replay(args) -> int:
    diffs = replay(args.run_dir, args.out)
    if diffs:
        print("replay differs: " + ", ".join(diffs))
        return 1
    print("replay identical")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardsim")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a trace for a number of epochs")
    run.add_argument("--config", help="flat YAML config file")
    run.add_argument("--trace", required=True, help="CSV with from,to[,amount]")
    run.add_argument("--epochs", type=int, required=True)
    run.add_argument("--out", required=True, help="output directory for CSVs")
    run.add_argument("--scenario", default="contribchain1", help=", ".join(SCENARIOS))
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key (repeatable)")
    run.add_argument("--limit", type=int, help="read at most this many trace rows")
    run.add_argument("--dump-blocks", action="store_true", help="write blocks.jsonl")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench-alloc", help="compare account allocation algorithms")
    bench.add_argument("--trace", required=True)
    bench.add_argument("--tps", default="1000,800,800,600",
                       help="comma-separated shard TPS; its length sets K")
    bench.add_argument("--sizes", help="comma-separated prefix lengths of the trace")
    bench.add_argument("--beta", type=float, default=2.0)
    bench.add_argument("--out", help="write the table as CSV")
    bench.set_defaults(func=cmd_bench)

    sec = sub.add_parser("analyze-security", help="A-Shard failure probability")
    sec.add_argument("--n", type=int, required=True, help="total nodes")
    sec.add_argument("--na", type=int, required=True, help="A-Shard size")
    sec.add_argument("--rho", type=float, required=True, help="malicious fraction")
    sec.set_defaults(func=cmd_security)

    rep = sub.add_parser("replay", help="re-run a recorded experiment and compare outputs")
    rep.add_argument("run_dir")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SHARDSIM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
