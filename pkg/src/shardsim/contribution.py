"""Stage and global node contribution values.

A shard's leader records, for each consensus round, how many transactions the
block carried, whether it was committed, and which nodes behaved correctly.
From one epoch of such records we derive each node's stage performance value
(its share of the shard's committed throughput, minus a penalty for siding with
a failed block) and its stage security value (a leader-weighted ratio of correct
to wrong behavior). Global values are an exponential moving average of stages.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

from .model import Address

log = logging.getLogger(__name__)


class Role(str, enum.Enum):
    LEADER = "leader"
    FOLLOWER = "follower"


class LedgerError(ValueError):
    pass


class NoEvidenceError(LedgerError):
    pass


class Contribution(NamedTuple):
    s: float
    p: float


@dataclass(frozen=True)
class BehaviorRecord:
    block_id: int
    tx_count: int
    delta: int                                   # 0 committed, 1 failed
    per_node: Mapping[Address, tuple[int, Role]]  # node -> (e_ij, role)

    def __post_init__(self) -> None:
        if self.tx_count < 0:
            raise LedgerError("tx_count must be nonnegative")
        if self.delta not in (0, 1):
            raise LedgerError("delta must be 0 or 1")
        if not self.per_node:
            raise LedgerError("record has no nodes")
        leaders = sum(1 for _, role in self.per_node.values() if role is Role.LEADER)
        if leaders != 1:
            raise LedgerError(f"record {self.block_id} has {leaders} leaders")
        if self.correct_nodes == 0:
            raise LedgerError(f"record {self.block_id} has no correct node")

    @property
    def correct_nodes(self) -> int:
        return sum(e for e, _ in self.per_node.values())

    @property
    def total_nodes(self) -> int:
        return len(self.per_node)

    def to_json(self) -> str:
        nodes = [[node.to_hex(), e, role.value]
                 for node, (e, role) in sorted(self.per_node.items())]
        return json.dumps({"block_id": self.block_id, "tx_count": self.tx_count,
                           "delta": self.delta, "nodes": nodes}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "BehaviorRecord":
        raw = json.loads(line)
        per_node = {Address.from_hex(h): (int(e), Role(r)) for h, e, r in raw["nodes"]}
        return cls(raw["block_id"], raw["tx_count"], raw["delta"], per_node)


# Counter slots: leader-right, leader-wrong, follower-right, follower-wrong.
MR, MW, FR, FW = range(4)


@dataclass
class ContributionLedger:
    epoch: int
    epoch_duration: float                     # seconds
    records: list[BehaviorRecord] = field(default_factory=list)
    members: set[Address] = field(default_factory=set)
    counters: dict[Address, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        records, self.records = self.records, []
        for node in self.members:
            self.counters.setdefault(node, [0, 0, 0, 0])
        for rec in records:
            self.append(rec)

    def append(self, record: BehaviorRecord) -> None:
        self.records.append(record)
        for node, (e, role) in record.per_node.items():
            if node not in self.members:
                self.members.add(node)
                self.counters[node] = [0, 0, 0, 0]
            slot = (MR if e else MW) if role is Role.LEADER else (FR if e else FW)
            self.counters[node][slot] += 1

    def recount(self) -> dict[Address, list[int]]:
        """Tallies recomputed from scratch; equals ``counters`` by invariant."""
        fresh = {node: [0, 0, 0, 0] for node in self.members}
        for rec in self.records:
            for node, (e, role) in rec.per_node.items():
                slot = (MR if e else MW) if role is Role.LEADER else (FR if e else FW)
                fresh[node][slot] += 1
        return fresh

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path, epoch: int, epoch_duration: float) -> "ContributionLedger":
        with open(path) as fh:
            records = [BehaviorRecord.from_json(line) for line in fh if line.strip()]
        return cls(epoch, epoch_duration, records)


def _record_shares(rec: BehaviorRecord) -> tuple[float, float]:
    """(reward per correct node, penalty per wrong node) for one block."""
    n, n_r = rec.total_nodes, rec.correct_nodes
    reward = rec.tx_count / n_r
    if not rec.delta:
        return reward, 0.0
    if n == n_r:
        log.warning("block %s failed with every node correct; penalty term set to 0",
                    rec.block_id)
        return reward, 0.0
    return reward, rec.tx_count / (n - n_r)


def stage_performance(ledger: ContributionLedger, node: Address) -> float:
    if node not in ledger.members:
        raise LedgerError("node not in ledger")
    total = 0.0
    for rec in ledger.records:
        try:
            e, _ = rec.per_node[node]
        except KeyError:
            raise LedgerError(f"node missing from record {rec.block_id}") from None
        reward, penalty = _record_shares(rec)
        total += reward * e - rec.delta * penalty * (1 - e)
    return total / ledger.epoch_duration


def stage_performances(ledger: ContributionLedger) -> dict[Address, float]:
    """Stage performance of every member in a single pass over the records."""
    totals = dict.fromkeys(ledger.members, 0.0)
    for rec in ledger.records:
        if len(rec.per_node) != len(totals):
            raise LedgerError(f"record {rec.block_id} does not cover every member")
        reward, penalty = _record_shares(rec)
        for node, (e, _) in rec.per_node.items():
            totals[node] += reward if e else -rec.delta * penalty
    return {node: v / ledger.epoch_duration for node, v in totals.items()}


def security_from_counts(counts, mu: float, theta: float, lam: float) -> float:
    n_mr, n_mw, n_fr, n_fw = counts
    if n_mr + n_mw + n_fr + n_fw == 0:
        raise NoEvidenceError("no behavior evidence")
    # Leader rounds weigh lam in both numerator and denominator, so the value
    # is a weighted mean of +mu / -theta and stays inside [-theta, mu].
    right, wrong = lam * n_mr + n_fr, lam * n_mw + n_fw
    denom = lam * (n_mr + n_mw) + n_fr + n_fw
    # Dividing first keeps an all-correct node at exactly mu.
    return mu * (right / denom) - theta * (wrong / denom)


def stage_security(ledger: ContributionLedger, node: Address,
                   mu: float, theta: float, lam: float) -> float:
    if node not in ledger.members:
        raise LedgerError("node not in ledger")
    return security_from_counts(ledger.counters[node], mu, theta, lam)


def update_global(prev: float, stage: float, alpha: float) -> float:
    return alpha * prev + (1 - alpha) * stage


def tolerance_threshold(mu: float, theta: float) -> float:
    """Wrong-behavior ratio above which a follower's stage security turns negative."""
    return mu / (mu + theta)


def honest_quorum_level(mu: float, theta: float) -> float:
    """Stage security of a follower marked wrong in one third of the rounds."""
    return (2 * mu - theta) / 3


def shard_epoch_tps(ledger: ContributionLedger) -> float:
    committed = sum(rec.tx_count for rec in ledger.records if not rec.delta)
    return committed / ledger.epoch_duration


def genesis_contribution(mu: float, theta: float) -> Contribution:
    return Contribution(honest_quorum_level(mu, theta), 0.0)


def update_epoch(ledgers: Iterable[ContributionLedger],
                 prev: Mapping[Address, Contribution],
                 cfg,
                 a_shard_nodes: Iterable[Address] = ()) -> dict[Address, Contribution]:
    """Fold one epoch of W-Shard ledgers into the global contribution values.

    A-Shard members take the all-correct follower stage value ``mu`` for
    security and keep their performance value. Nodes without evidence are
    carried forward unchanged.
    """
    out = dict(prev)
    for ledger in ledgers:
        perf = stage_performances(ledger)
        for node in ledger.members:
            s_old, p_old = prev[node]
            try:
                ds = stage_security(ledger, node, cfg.mu, cfg.theta, cfg.lam)
                s_new = update_global(s_old, ds, cfg.alpha)
            except NoEvidenceError:
                s_new = s_old
            out[node] = Contribution(s_new, update_global(p_old, perf[node], cfg.alpha))
    for node in a_shard_nodes:
        s_old, p_old = prev[node]
        out[node] = Contribution(update_global(s_old, cfg.mu, cfg.alpha), p_old)
    return out

