import csv

import pytest
import yaml

from shardsim.cli import main
from shardsim.config import default_config
from shardsim.metrics import (MetricsReport, _percentile, bench_allocation, compute_metrics,
                              replay, run_experiment, write_bench)
from shardsim.sim import World

from conftest import FIXTURES

CFG = default_config().replace(K=2, nodes_per_shard=6, epoch_duration=20.0, block_interval=1.0,
                               block_capacity=100, inject_rate=100.0, T_NA=20.0, f=2,
                               table1_setting=4)
TRACE = FIXTURES / "trace_10k.csv"


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_percentile():
    assert _percentile([], 0.5) == 0.0
    assert _percentile([1.0, 2.0, 3.0, 4.0], 0.5) == 2.5
    assert _percentile([5.0], 0.95) == 5.0


def test_empty_world_report():
    assert compute_metrics(World(CFG, [])) == MetricsReport()
    r = compute_metrics(World(CFG, []).run(1))
    assert r.tps == 0.0 and r.finalized == 0 and r.duration_s == 20.0


def test_report_consistency(trace_10k):
    report, world = run_experiment(CFG, trace_10k[:3000], 3)
    assert report.finalized == len(world.final)
    assert report.tps == pytest.approx(report.finalized / report.duration_s)
    assert report.injected == report.finalized + report.queued
    assert 0.0 <= report.cross_shard_ratio <= 1.0
    assert report.cross_shard_ratio == pytest.approx(
        world.cross_commits / (world.cross_commits + world.intra_commits))
    assert len(report.shard_security_variance_series) == 3
    assert len(report.per_shard_processing_time) == 2
    assert report.p50_latency <= report.p95_latency
    assert report.peak_queue >= max(sum(q) for _, q in report.queue_size_series[-1:])


def test_outputs_and_replay(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--trace", str(TRACE), "--epochs", "2", "--out", str(out),
                 "--limit", "2000", "--dump-blocks",
                 "--set", "K=2", "--set", "nodes_per_shard=6", "--set", "epoch_duration=20",
                 "--set", "block_interval=1", "--set", "block_capacity=100",
                 "--set", "inject_rate=100", "--set", "T_NA=20"]) == 0
    for name in ("summary.csv", "queue_size.csv", "shard_processing_time.csv",
                 "security_variance.csv", "workload.csv", "timing.csv", "run.yaml",
                 "blocks.jsonl"):
        assert (out / name).exists(), name
    assert rows(out / "queue_size.csv")[0] == ["time_ms", "shard_0", "shard_1", "total"]
    assert len(rows(out / "security_variance.csv")) == 3
    manifest = yaml.safe_load((out / "run.yaml").read_text())
    assert manifest["trace_rows"] == 2000 and manifest["config"]["K"] == 2
    assert replay(out, tmp_path / "again") == []
    assert main(["replay", str(out), "--out", str(tmp_path / "third")]) == 0


def test_cli_errors(tmp_path, capsys):
    assert main(["run", "--trace", str(tmp_path / "missing.csv"), "--epochs", "1",
                 "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["run", "--trace", str(TRACE), "--epochs", "1", "--out", str(tmp_path / "o"),
                 "--scenario", "clpa"]) == 2
    assert main(["run", "--trace", str(TRACE), "--epochs", "1", "--out", str(tmp_path / "o"),
                 "--set", "nonsense=1"]) == 2


def test_cli_security(capsys):
    assert main(["analyze-security", "--n", "4", "--na", "2", "--rho", "0.5"]) == 0
    assert "(5/6)" in capsys.readouterr().out


def test_bench(tmp_path, trace_10k, capsys):
    rows_ = bench_allocation(trace_10k[:4000], 4, [1000, 800, 800, 600])
    assert [r.algorithm for r in rows_] == ["p-louvain", "louvain-greedy", "hash"]
    assert all(r.tx_count == 4000 for r in rows_)
    with pytest.raises(ValueError, match="unknown allocation algorithm"):
        bench_allocation(trace_10k[:10], 2, [1, 1], ["magic"])
    write_bench(tmp_path / "b.csv", rows_)
    assert rows(tmp_path / "b.csv")[0] == ["algorithm", "tx_count", "max_time", "cross_ratio",
                                           "runtime_ms"]
    assert main(["bench-alloc", "--trace", str(TRACE), "--sizes", "1000,2000",
                 "--out", str(tmp_path / "c.csv")]) == 0
    assert len(rows(tmp_path / "c.csv")) == 7
