"""Experiment configuration, validation, and the node safety / delay presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import yaml


@dataclass(frozen=True)
class Table1Setting:
    """Per-shard malicious node counts (cycled over shard index), behavior
    probability range, and the (shard, node) delay coefficients in ms."""

    malicious_counts: tuple[int, ...]
    prob_range: tuple[float, float]
    L_s: float
    L_n: float


TABLE1 = {
    1: Table1Setting((1,), (0.05, 0.05), 0, 0),
    2: Table1Setting((1,), (0.05, 0.05), 10, 5),
    3: Table1Setting((0, 1, 2), (0.05, 0.05), 50, 5),
    4: Table1Setting((0, 1, 2), (0.05, 0.05), 200, 10),
    5: Table1Setting((0, 1, 2), (0.20, 0.54), 200, 10),
    6: Table1Setting((0, 1, 2), (1.0, 1.0), 300, 10),
    7: Table1Setting((0, 2, 2), (1.0, 1.0), 300, 10),
}


@dataclass
class ExperimentConfig:
    K: int = 4
    epoch_duration: float = 200.0     # seconds
    block_capacity: int = 2000        # txs per block
    block_interval: float = 5.0       # seconds
    f: int = 4                        # account allocation period, epochs
    T_NA: float = 80.0                # node allocation period, seconds
    mu: float = 0.9
    theta: float = 1.5
    lam: float = 2.0
    alpha: float = 0.7
    eps: float = 0.05
    beta: float = 2.0
    inject_rate: float = 2000.0       # tx/s
    seed: int = 0
    table1_setting: int = 1
    nodes_per_shard: int = 8          # total population is (K + 1) * nodes_per_shard
    i_thre: int = 50
    var_thre_s: float = 0.01
    var_thre_t: float = 0.25          # s^2

    @property
    def epoch_ms(self) -> int:
        return round(self.epoch_duration * 1000)

    @property
    def block_interval_ms(self) -> int:
        return round(self.block_interval * 1000)

    @property
    def t_na_ms(self) -> int:
        return round(self.T_NA * 1000)

    @property
    def n_nodes(self) -> int:
        return (self.K + 1) * self.nodes_per_shard

    @property
    def setting(self) -> Table1Setting:
        return TABLE1[self.table1_setting]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Return every violated invariant; an empty list means the config is valid."""
    problems = []
    if not cfg.theta > cfg.mu:
        problems.append("θ > μ fails")
    if not cfg.mu >= cfg.theta / 2:
        problems.append("μ ≥ θ/2 fails")
    if not cfg.lam > 1:
        problems.append("λ > 1 fails")
    if not 0 <= cfg.alpha <= 1:
        problems.append("α ∈ [0,1] fails")
    if cfg.K < 1:
        problems.append("K ≥ 1 fails")
    if cfg.epoch_duration <= 0:
        problems.append("epoch_duration > 0 fails")
    if cfg.block_interval <= 0:
        problems.append("block_interval > 0 fails")
    if cfg.block_capacity < 1:
        problems.append("block_capacity ≥ 1 fails")
    if cfg.f < 1:
        problems.append("f ≥ 1 fails")
    if cfg.T_NA <= 0:
        problems.append("T_NA > 0 fails")
    if cfg.inject_rate <= 0:
        problems.append("inject_rate > 0 fails")
    if cfg.eps < 0:
        problems.append("ε ≥ 0 fails")
    if cfg.beta < 0:
        problems.append("β ≥ 0 fails")
    if cfg.table1_setting not in TABLE1:
        problems.append(f"table1_setting ∈ {sorted(TABLE1)} fails")
    if cfg.nodes_per_shard < 4:
        problems.append("nodes_per_shard ≥ 4 fails")
    if cfg.i_thre < 1 or cfg.var_thre_s <= 0 or cfg.var_thre_t <= 0:
        problems.append("NACV thresholds positive fails")
    return problems


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_TYPES = {"int": int, "float": float}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise KeyError(f"unknown config key: {key}")
    kind = _TYPES[_FIELDS[key].type]
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key} expects an integer, got {value}")
        return int(value)
    return float(value)


def config_from_mapping(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or default_config()
    return base.replace(**{k: _coerce(k, v) for k, v in data.items()})


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read a flat ``key: value`` YAML file, then apply ``key=value`` overrides."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ValueError(f"{path}: config must be a flat key/value mapping")
    return apply_overrides(config_from_mapping(data), overrides)


def apply_overrides(cfg: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    changes = {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override must look like key=value: {item!r}")
        changes[key.strip()] = yaml.safe_load(raw)
    return config_from_mapping(changes, cfg) if changes else cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)
