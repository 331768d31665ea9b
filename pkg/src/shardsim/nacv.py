"""Node allocation by contribution values.

Works on a node-to-W-Shard mapping. Shard security is the mean member
security value, shard performance the summed member performance value, and
shard processing time the shard's workload over its performance. Nodes that
were not in a W-Shard last epoch are placed first; then random swaps between
the least and most secure shards lower the variance of shard security; then
swaps between the fastest and slowest shards lower the variance of processing
time, each accepted only while security variance stays under its threshold.

All random choices index into candidate lists sorted by address, drawing from
a generator seeded by the caller, so any party holding the same inputs and seed
reproduces the same mapping.
"""

from __future__ import annotations

import csv
import logging
import math
import random
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .contribution import Contribution
from .model import A_SHARD, Address

log = logging.getLogger(__name__)


class EmptyShardError(ValueError):
    pass


@dataclass(frozen=True)
class NacvThresholds:
    i_thre: int = 50
    var_thre_s: float = 0.01
    var_thre_t: float = 0.25

    def __post_init__(self) -> None:
        if self.i_thre <= 0 or self.var_thre_s <= 0 or self.var_thre_t <= 0:
            raise ValueError("NACV thresholds must be positive")

    @classmethod
    def from_config(cls, cfg) -> "NacvThresholds":
        return cls(cfg.i_thre, cfg.var_thre_s, cfg.var_thre_t)


def pvariance(values: Sequence[float]) -> float:
    if not values:
        return 0.0
    if any(math.isinf(v) for v in values):
        return math.inf
    return statistics.pvariance(values)


def exact_mean(values: Iterable[float]) -> float:
    """Correctly rounded mean, so equal members give equal shard values at any size."""
    values = list(values)
    return float(sum(map(Fraction, values)) / len(values))


@dataclass
class ShardStats:
    s: list[float]
    p: list[float]
    workload: list[float]
    t: list[float]

    @property
    def var_s(self) -> float:
        return pvariance(self.s)

    @property
    def var_t(self) -> float:
        return pvariance(self.t)


def _time(workload: float, perf: float) -> float:
    if perf <= 0:
        log.warning("shard performance %.4g is not positive; processing time set to inf", perf)
        return math.inf
    return workload / perf


class _Shards:
    """Mutable working view of a mapping with per-shard member sets."""

    def __init__(self, mapping: Mapping[Address, int], contrib: Mapping[Address, Contribution],
                 workloads: Sequence[float], K: int):
        self.K = K
        self.contrib = contrib
        self.workloads = list(workloads)
        if len(self.workloads) != K:
            raise ValueError(f"expected {K} workloads, got {len(self.workloads)}")
        self.mapping = dict(mapping)
        self.members: list[set[Address]] = [set() for _ in range(K)]
        for node, k in self.mapping.items():
            if not 0 <= k < K:
                raise ValueError(f"node {node!r} mapped to {k}, not a W-Shard")
            self.members[k].add(node)

    def place(self, node: Address, k: int) -> None:
        self.mapping[node] = k
        self.members[k].add(node)

    def swap(self, a: Address, b: Address) -> None:
        ka, kb = self.mapping[a], self.mapping[b]
        self.members[ka].remove(a)
        self.members[kb].remove(b)
        self.members[kb].add(a)
        self.members[ka].add(b)
        self.mapping[a], self.mapping[b] = kb, ka

    def security(self, k: int) -> float:
        if not self.members[k]:
            raise EmptyShardError(f"empty shard {k}")
        return exact_mean(self.contrib[n].s for n in self.members[k])

    def perf(self, k: int) -> float:
        return math.fsum(self.contrib[n].p for n in self.members[k])

    def time(self, k: int) -> float:
        return _time(self.workloads[k], self.perf(k))

    def stats(self) -> ShardStats:
        s = [self.security(k) for k in range(self.K)]
        return ShardStats(s, [self.perf(k) for k in range(self.K)], list(self.workloads),
                          [self.time(k) for k in range(self.K)])

    def var_s(self) -> float:
        return pvariance([self.security(k) for k in range(self.K)])

    def var_t(self) -> float:
        return pvariance([self.time(k) for k in range(self.K)])

    def argmin(self, key) -> int:
        return min(range(self.K), key=lambda k: (key(k), k))

    def argmax(self, key) -> int:
        return min(range(self.K), key=lambda k: (-key(k), k))


def _pick(rng: random.Random, candidates: Iterable[Address]) -> Optional[Address]:
    ordered = sorted(candidates)
    if not ordered:
        return None
    return ordered[rng.randrange(len(ordered))]


def shard_stats(mapping: Mapping[Address, int], contributions: Mapping[Address, Contribution],
                workloads: Sequence[float], K: int) -> ShardStats:
    return _Shards(mapping, contributions, workloads, K).stats()


def averages(contributions: Mapping[Address, Contribution], s_nodes: Iterable[Address],
             p_nodes: Iterable[Address]) -> tuple[float, float]:
    s_vals = [contributions[n].s for n in s_nodes]
    p_vals = [contributions[n].p for n in p_nodes]
    return (sum(s_vals) / len(s_vals) if s_vals else 0.0,
            sum(p_vals) / len(p_vals) if p_vals else 0.0)


def place_new_nodes(mapping: Mapping[Address, int], new_nodes: Iterable[Address],
                    contributions: Mapping[Address, Contribution], workloads: Sequence[float],
                    K: int, s_avg: float, p_avg: float, min_size: int = 1
                    ) -> tuple[dict[Address, int], dict[Address, Contribution]]:
    """Place nodes absent from the W-Shards last epoch.

    Nodes with no contribution history get the population averages. Shards
    below ``min_size`` members are topped up first, lowest index first.
    """
    contrib = dict(contributions)
    new_nodes = sorted(set(new_nodes) - set(mapping))
    for node in new_nodes:
        contrib.setdefault(node, Contribution(s_avg, p_avg))
    shards = _Shards(mapping, contrib, workloads, K)
    for node in new_nodes:
        short = [k for k in range(K) if len(shards.members[k]) < min_size]
        if short:
            target = short[0]
        elif contrib[node].s >= s_avg:
            target = shards.argmin(shards.security)
        elif contrib[node].p >= p_avg:
            target = shards.argmax(shards.time)
        else:
            target = shards.argmax(shards.security)
        shards.place(node, target)
    return shards.mapping, contrib


@dataclass
class SecurityResult:
    mapping: dict[Address, int]
    var_s: float
    initial_var_s: float
    iterations: int


def security_adjust(mapping: Mapping[Address, int], contributions: Mapping[Address, Contribution],
                    workloads: Sequence[float], K: int, thresholds: NacvThresholds,
                    rng: random.Random, s_avg: float) -> SecurityResult:
    shards = _Shards(mapping, contributions, workloads, K)
    best_var = initial = shards.var_s()
    best = dict(shards.mapping)
    i = 0
    while best_var > thresholds.var_thre_s and i < thresholds.i_thre:
        i += 1
        low = shards.argmin(shards.security)
        high = shards.argmax(shards.security)
        n_i = _pick(rng, (n for n in shards.members[low] if contributions[n].s <= s_avg))
        n_j = _pick(rng, (n for n in shards.members[high] if contributions[n].s >= s_avg))
        if n_i is None or n_j is None or low == high:
            continue
        shards.swap(n_i, n_j)
        var = shards.var_s()
        if var < best_var:
            best_var, best = var, dict(shards.mapping)
    return SecurityResult(best, best_var, initial, i)


@dataclass
class Swap:
    low_node: Address      # the faster shard's node sent to the slower shard
    high_node: Address
    var_t: float
    var_s: float
    accepted: bool


@dataclass
class PerformanceResult:
    mapping: dict[Address, int]
    aborted: bool
    var_t: float
    initial_var_t: float
    iterations: int
    swaps: list[Swap] = field(default_factory=list)


def _performance_pair(shards: _Shards, contrib: Mapping[Address, Contribution],
                      rng: random.Random, p_avg: float) -> Optional[tuple[Address, Address]]:
    fast = shards.argmin(shards.time)
    slow = shards.argmax(shards.time)
    if fast == slow:
        return None
    p = lambda n: contrib[n].p  # noqa: E731
    n_i = _pick(rng, (n for n in shards.members[fast] if p(n) >= p_avg))
    n_j = _pick(rng, (n for n in shards.members[slow] if p(n) <= p_avg))
    if n_i is not None and n_j is not None:
        return n_i, n_j
    for pool in (shards.members[fast],
                 (n for n, k in shards.mapping.items() if k != slow)):
        pool = list(pool)
        if not pool:
            continue
        n_i = min(pool, key=lambda n: (-p(n), n))
        n_j = _pick(rng, (n for n in shards.members[slow] if p(n) < p(n_i)))
        if n_j is not None:
            return n_i, n_j
    return None


def performance_adjust(mapping: Mapping[Address, int],
                       contributions: Mapping[Address, Contribution],
                       workloads: Sequence[float], K: int, thresholds: NacvThresholds,
                       rng: random.Random, p_avg: float) -> PerformanceResult:
    shards = _Shards(mapping, contributions, workloads, K)
    best_var = initial = shards.var_t()
    best = dict(shards.mapping)
    result = PerformanceResult(best, False, best_var, initial, 0)
    i = 0
    while best_var > thresholds.var_thre_t and i < thresholds.i_thre:
        pair = _performance_pair(shards, contributions, rng, p_avg)
        if pair is None:
            result.aborted = True
            break
        shards.swap(*pair)
        i += 1
        var_t, var_s = shards.var_t(), shards.var_s()
        accepted = var_t < best_var and var_s < thresholds.var_thre_s
        if accepted:
            best_var, best = var_t, dict(shards.mapping)
        result.swaps.append(Swap(pair[0], pair[1], var_t, var_s, accepted))
    result.mapping, result.var_t, result.iterations = best, best_var, i
    return result


@dataclass
class NacvResult:
    mapping: dict[Address, int]
    contributions: dict[Address, Contribution]
    aborted: bool
    security: SecurityResult
    performance: PerformanceResult

    @property
    def var_s(self) -> float:
        return self.security.var_s

    @property
    def var_t(self) -> float:
        return self.performance.var_t


def nacv(mapping: Mapping[Address, int], contributions: Mapping[Address, Contribution],
         workloads: Sequence[float], K: int, thresholds: NacvThresholds, seed,
         new_nodes: Iterable[Address] = (), s_avg: Optional[float] = None,
         p_avg: Optional[float] = None, min_size: int = 1) -> NacvResult:
    """Run the four allocation steps and return the best mapping found.

    ``aborted`` means no swap candidate existed during performance
    adjustment; the caller should then re-run account allocation. The returned
    mapping is still the best one found up to that point.
    """
    new_nodes = list(new_nodes)
    if s_avg is None or p_avg is None:
        known = [n for n in list(mapping) + new_nodes if n in contributions]
        d_s, d_p = averages(contributions, known, known)
        s_avg = d_s if s_avg is None else s_avg
        p_avg = d_p if p_avg is None else p_avg
    placed, contrib = place_new_nodes(mapping, new_nodes, contributions, workloads, K,
                                      s_avg, p_avg, min_size)
    sec = security_adjust(placed, contrib, workloads, K, thresholds,
                          random.Random(f"{seed}/security"), s_avg)
    perf = performance_adjust(sec.mapping, contrib, workloads, K, thresholds,
                              random.Random(f"{seed}/performance"), p_avg)
    return NacvResult(perf.mapping, contrib, perf.aborted, sec, perf)


def a_shard_select(identities: Sequence[Address], K: int) -> tuple[list[Address], dict[Address, int]]:
    """Split the identity space into K + 1 equal intervals.

    Identities in the last interval form the A-Shard; the rest are returned
    with their interval index, the Epoch 0 W-Shard assignment.
    """
    if K <= 0:
        raise ValueError("K must be positive")
    if not identities:
        raise ValueError("no identities")
    if len(set(identities)) != len(identities):
        raise ValueError("identities must be distinct")
    space = 1 << 256
    a_shard, w_shard = [], {}
    for ident in sorted(identities):
        interval = ident * (K + 1) // space
        if interval == K:
            a_shard.append(ident)
        else:
            w_shard[ident] = interval
    if not a_shard:
        raise EmptyShardError("A-Shard empty")
    return a_shard, w_shard



def write_mapping_csv(path: Union[str, Path], mapping: Mapping[Address, int]) -> None:
    """``node_address,shard_index`` rows sorted by address; A-Shard members use -1."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["node_address", "shard_index"])
        for v in sorted(mapping):
            out.writerow([v.to_hex(), mapping[v]])


def read_mapping_csv(path: Union[str, Path]) -> dict[Address, int]:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["node_address", "shard_index"]:
            raise ValueError(f"{path}: expected header node_address,shard_index")
        out = {}
        for line, row in enumerate(rows, start=2):
            try:
                addr, k = row
                out[Address.from_hex(addr)] = int(k)
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
        return out


__all__ = [
    "A_SHARD", "EmptyShardError", "NacvThresholds", "ShardStats", "NacvResult",
    "a_shard_select", "shard_stats", "place_new_nodes", "security_adjust",
    "performance_adjust", "nacv", "averages", "pvariance", "write_mapping_csv",
    "read_mapping_csv",
]
