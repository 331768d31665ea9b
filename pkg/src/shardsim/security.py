"""Probability that a randomly drawn A-Shard holds at least a third malicious members."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class SecurityQuery:
    n: int          # total nodes
    n_a: int        # A-Shard size
    rho: float      # malicious fraction of the population

    def __post_init__(self) -> None:
        if self.n < 1 or not 0 <= self.n_a <= self.n:
            raise ValueError("need 0 <= n_a <= n and n >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    @property
    def malicious(self) -> int:
        # rho * n is a head count; floor it, absorbing float noise such as 0.29 * 100.
        return min(self.n, math.floor(self.rho * self.n + 1e-9))


def failure_probability_exact(n: int, n_a: int, malicious: int) -> Fraction:
    """Exact P[X >= ceil(n_a / 3)] for X hypergeometric(n, malicious, n_a)."""
    if not 0 <= malicious <= n or not 0 <= n_a <= n:
        raise ValueError("counts out of range")
    threshold = -(-n_a // 3)
    honest = n - malicious
    # math.comb(a, b) is 0 for b > a, so impossible draws drop out.
    hits = sum(math.comb(malicious, x) * math.comb(honest, n_a - x)
               for x in range(threshold, n_a + 1))
    return Fraction(hits, math.comb(n, n_a))


def a_shard_failure_probability(q: SecurityQuery) -> float:
    return float(failure_probability_exact(q.n, q.n_a, q.malicious))
