"""Evaluation metrics, experiment runs and the allocation benchmark.

CSV files written by ``write_metrics`` (one per metric family):

``summary.csv``
    metric,value
``queue_size.csv``
    time_ms,shard_0..shard_{K-1},total  (sampled every block interval, plus run end)
``shard_processing_time.csv``
    shard,busy_s,queued_at_end,processing_time_s
``security_variance.csv``
    epoch,var_s,node_allocation,account_allocation,nacv_aborted
``workload.csv``
    epoch,shard,committed_halves
``timing.csv``
    epoch,algorithm,runtime_ms  (wall clock, so not part of replay comparison)
"""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import yaml

from .authstate import dump_blocks
from .config import ExperimentConfig, config_from_mapping, dump_config
from .plouvain import (build_graph, cross_shard_ratio, hash_allocation, louvain_greedy,
                       p_louvain)
from .sim import World
from .workload import TraceRecord, load_trace

log = logging.getLogger(__name__)

REPLAY_FILES = ("summary.csv", "queue_size.csv", "shard_processing_time.csv",
                "security_variance.csv", "workload.csv")


@dataclass
class MetricsReport:
    tps: float = 0.0
    mean_latency: float = 0.0      # ms
    p50_latency: float = 0.0
    p95_latency: float = 0.0
    cross_shard_ratio: float = 0.0
    queue_size_series: list = field(default_factory=list)
    per_shard_processing_time: list = field(default_factory=list)   # seconds
    shard_security_variance_series: list = field(default_factory=list)
    workload_per_shard: list = field(default_factory=list)          # per epoch
    allocation_runtime: list = field(default_factory=list)          # (epoch, algorithm, ms)
    injected: int = 0
    finalized: int = 0
    queued: int = 0
    duration_s: float = 0.0

    @property
    def peak_queue(self) -> int:
        return max((sum(q) for _, q in self.queue_size_series), default=0)

    @property
    def max_processing_time(self) -> float:
        return max(self.per_shard_processing_time, default=0.0)


def _percentile(sorted_vals: Sequence[float], q: float) -> float:
    """Linear interpolation between closest ranks."""
    if not sorted_vals:
        return 0.0
    pos = (len(sorted_vals) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def compute_metrics(world: World) -> MetricsReport:
    if world.epoch == 0:
        return MetricsReport()
    duration_s = world.duration_ms / 1000
    latencies = sorted(c - i for i, c in world.final.values())
    processed = world.intra_commits + world.cross_commits
    cap = world.cfg.block_capacity
    proc = []
    for k in range(world.K):
        total_ms, rounds = world.round_stats[k]
        mean_round = total_ms / rounds if rounds else world.cfg.block_interval_ms
        backlog = len(world.pools[k])
        proc.append((world.busy_ms[k] + backlog / cap * mean_round) / 1000)
    return MetricsReport(
        tps=len(world.final) / duration_s,
        mean_latency=statistics.fmean(latencies) if latencies else 0.0,
        p50_latency=_percentile(latencies, 0.5),
        p95_latency=_percentile(latencies, 0.95),
        cross_shard_ratio=world.cross_commits / processed if processed else 0.0,
        queue_size_series=list(world.queue_samples),
        per_shard_processing_time=proc,
        shard_security_variance_series=[e.var_s for e in world.epochs],
        workload_per_shard=[list(w) for w in world.workload],
        allocation_runtime=list(world.alloc_runtime),
        injected=world.injected,
        finalized=len(world.final),
        queued=world.queued(),
        duration_s=duration_s,
    )


def _write(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def write_metrics(out: Union[str, Path], report: MetricsReport, world: World) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    K = world.K
    summary = [
        ("scenario", world.scenario.name), ("epochs", world.epoch),
        ("duration_s", report.duration_s), ("tps", report.tps),
        ("mean_latency_ms", report.mean_latency), ("p50_latency_ms", report.p50_latency),
        ("p95_latency_ms", report.p95_latency), ("cross_shard_ratio", report.cross_shard_ratio),
        ("injected", report.injected), ("finalized", report.finalized),
        ("queued_at_end", report.queued), ("peak_queue", report.peak_queue),
        ("max_processing_time_s", report.max_processing_time),
    ]
    _write(out / "summary.csv", ("metric", "value"), summary)
    _write(out / "queue_size.csv", ["time_ms"] + [f"shard_{k}" for k in range(K)] + ["total"],
           ([t] + q + [sum(q)] for t, q in report.queue_size_series))
    _write(out / "shard_processing_time.csv",
           ("shard", "busy_s", "queued_at_end", "processing_time_s"),
           ((k, world.busy_ms[k] / 1000, len(world.pools[k]), report.per_shard_processing_time[k])
            for k in range(K)))
    _write(out / "security_variance.csv",
           ("epoch", "var_s", "node_allocation", "account_allocation", "nacv_aborted"),
           ((e.epoch, e.var_s, int(e.node_allocation), int(e.account_allocation),
             int(e.nacv_aborted)) for e in world.epochs))
    _write(out / "workload.csv", ("epoch", "shard", "committed_halves"),
           ((e, k, w[k]) for e, w in enumerate(report.workload_per_shard) for k in range(K)))
    _write(out / "timing.csv", ("epoch", "algorithm", "runtime_ms"),
           report.allocation_runtime)


def format_summary(report: MetricsReport, scenario: str) -> str:
    lines = [
        f"scenario            {scenario}",
        f"duration            {report.duration_s:.1f} s",
        f"TPS                 {report.tps:.2f}",
        f"latency mean/50/95  {report.mean_latency:.0f} / {report.p50_latency:.0f} / "
        f"{report.p95_latency:.0f} ms",
        f"cross-shard ratio   {report.cross_shard_ratio:.4f}",
        f"injected/finalized  {report.injected} / {report.finalized} (queued {report.queued})",
        f"peak queue          {report.peak_queue}",
        f"max shard time      {report.max_processing_time:.2f} s",
    ]
    return "\n".join(lines)


def run_experiment(cfg: ExperimentConfig, trace: Sequence[TraceRecord], epochs: int,
                   scenario: str = "contribchain1", out: Optional[Union[str, Path]] = None,
                   trace_path: Optional[str] = None, dump: bool = False
                   ) -> tuple[MetricsReport, World]:
    world = World(cfg, trace, scenario).run(epochs)
    report = compute_metrics(world)
    if out is not None:
        out = Path(out)
        write_metrics(out, report, world)
        manifest = {"scenario": scenario, "epochs": epochs, "trace": trace_path,
                    "trace_rows": len(trace), "config": yaml.safe_load(dump_config(cfg))}
        (out / "run.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
        if dump:
            dump_blocks(out / "blocks.jsonl", world.blocks)
    return report, world


def replay(run_dir: Union[str, Path], out: Union[str, Path]) -> list[str]:
    """Re-run the experiment recorded in ``run_dir/run.yaml`` into ``out``.

    Returns the metric files whose bytes differ (empty when the replay matches).
    """
    run_dir, out = Path(run_dir), Path(out)
    manifest = yaml.safe_load((run_dir / "run.yaml").read_text())
    if not manifest.get("trace"):
        raise ValueError("run.yaml does not name a trace file")
    cfg = config_from_mapping(manifest["config"])
    # The run may have used a prefix of the file (--limit), so read the same count.
    trace = load_trace(manifest["trace"], manifest["trace_rows"])
    if len(trace) != manifest["trace_rows"]:
        raise ValueError("trace file shorter than recorded run")
    run_experiment(cfg, trace, manifest["epochs"], manifest["scenario"], out, manifest["trace"])
    return [name for name in REPLAY_FILES
            if (run_dir / name).read_bytes() != (out / name).read_bytes()]


# -- allocation benchmark -----------------------------------------------------

ALGORITHMS = {
    "p-louvain": p_louvain,
    "louvain-greedy": louvain_greedy,
    "hash": hash_allocation,
}


@dataclass(frozen=True)
class BenchRow:
    algorithm: str
    tx_count: int
    max_time: float
    cross_ratio: float
    runtime_ms: float


def bench_allocation(trace: Sequence, K: int, P: Sequence[float],
                     algorithms: Iterable[str] = tuple(ALGORITHMS), beta: float = 2.0
                     ) -> list[BenchRow]:
    """Max shard processing time, cross-shard ratio and runtime per algorithm on one graph."""
    G = build_graph(trace)
    rows = []
    for name in algorithms:
        try:
            algo = ALGORITHMS[name]
        except KeyError:
            raise ValueError(f"unknown allocation algorithm {name!r}") from None
        t0 = time.perf_counter()
        part = algo(G, K, P, beta)
        ms = (time.perf_counter() - t0) * 1000
        rows.append(BenchRow(name, G.tx_count, part.max_time if G.adj else 0.0,
                             cross_shard_ratio(G, part.assignment), ms))
    return rows


def write_bench(path: Union[str, Path], rows: Iterable[BenchRow]) -> None:
    _write(Path(path), ("algorithm", "tx_count", "max_time", "cross_ratio", "runtime_ms"),
           ((r.algorithm, r.tx_count, r.max_time, r.cross_ratio, r.runtime_ms) for r in rows))
