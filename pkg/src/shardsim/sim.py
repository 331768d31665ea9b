"""Epoch-driven simulation of an A-Shard / W-Shard chain.

Each epoch runs the six phases in order: per-epoch identities, node
allocation (every ``T_NA`` seconds), account allocation (every ``f`` epochs,
or at once when NACV gives up), the State Block with reloaded pending
transactions, block production, and contribution bookkeeping.

Block production is a discrete event loop in integer milliseconds. Every
W-Shard starts a consensus round at the epoch start and then back to back;
a round lasts the block interval plus the largest delay among the shard's
nodes and must finish inside the epoch. At the end of a round its block is
committed (or its transactions return to the head of the pool) and the next
round pulls up to ``block_capacity`` transactions. Cross-shard transactions
debit at the origin shard and credit when their relay half commits in the
recipient's shard.
"""

from __future__ import annotations

import bisect
import hashlib
import heapq
import logging
import math
import random
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .authstate import (EMPTY_ROOT, StateBlock, SystemSummaryBlock, TXBlock,
                        build_state_block, build_summary_blocks)
from .config import ExperimentConfig, validate_config
from .contribution import (BehaviorRecord, Contribution, ContributionLedger, NoEvidenceError,
                           Role, genesis_contribution, security_from_counts, stage_performances,
                           update_epoch)
from .model import Account, Address, BehaviorProfile, Node, Transaction, TxKind
from .nacv import NacvThresholds, a_shard_select, averages, exact_mean, nacv, pvariance
from .plouvain import address_prefix_shard, build_graph, p_louvain, shard_loads
from .workload import TraceRecord

log = logging.getLogger(__name__)

PBFT_MIN = 4


@dataclass(frozen=True)
class Scenario:
    name: str
    node_allocation: str      # "nacv" or "interval"
    account_allocation: str   # "plouvain" or "hash"


SCENARIOS = {
    "contribchain1": Scenario("contribchain1", "nacv", "plouvain"),
    "contribchain2": Scenario("contribchain2", "interval", "plouvain"),
    "monoxide-hash": Scenario("monoxide-hash", "interval", "hash"),
}
# Listed so the name is recognised; its allocation rules are not part of this model.
DISABLED_SCENARIOS = {"clpa"}


def get_scenario(name: str) -> Scenario:
    if name in DISABLED_SCENARIOS:
        raise ValueError(f"scenario {name!r} is disabled: its allocation algorithm is not modelled")
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


class SimClock:
    def __init__(self, now: int = 0):
        self.now = now

    def advance(self, t: int) -> None:
        if t < self.now:
            raise ValueError(f"clock moved backwards: {t} < {self.now}")
        self.now = t


def establish_identities(node_ids: Sequence[Address], seed, epoch: int) -> list[Address]:
    """Per-epoch 256-bit identities, a keyed hash of (seed, epoch, node id)."""
    prefix = f"identity/{seed}/{epoch}/".encode()
    return [Address(int.from_bytes(hashlib.sha256(prefix + n.to_bytes32()).digest(), "big"))
            for n in node_ids]


def node_population(cfg: ExperimentConfig) -> list[Node]:
    """Nodes grouped into K + 1 configuration-time groups of ``nodes_per_shard``.

    Node ``i`` of group ``j`` gets delay L_s*j + L_n*i ms; the first
    ``malicious_counts[j]`` nodes of a group misbehave with the preset probability.
    """
    setting = cfg.setting
    id_rng = random.Random(f"nodes/{cfg.seed}")
    prob_rng = random.Random(f"behavior/{cfg.seed}")
    lo, hi = setting.prob_range
    nodes = []
    for idx in range(cfg.n_nodes):
        j, i = divmod(idx, cfg.nodes_per_shard)
        malicious = i < setting.malicious_counts[j % len(setting.malicious_counts)]
        prob = (lo if lo == hi else prob_rng.uniform(lo, hi)) if malicious else 0.0
        profile = BehaviorProfile(i, prob, setting.L_s * j + setting.L_n * i)
        nodes.append(Node(Address(id_rng.getrandbits(256)), -1, 0.0, 0.0, profile))
    return nodes


def schedule_injections(trace: Sequence[TraceRecord], rate: float, start_ms: int = 0
                        ) -> list[Transaction]:
    """Uniform inter-arrival ``1/rate``: tx ``i`` arrives at ``start + floor(i * 1000 / rate)`` ms."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    return [Transaction(i, r.sender, r.recipient, r.amount, start_ms + math.floor(i * 1000 / rate))
            for i, r in enumerate(trace)]


def ensure_minimum(mapping: dict[Address, int], K: int, minimum: int = PBFT_MIN
                   ) -> dict[Address, int]:
    """Top up shards below ``minimum`` from the largest shard (its highest address first)."""
    if len(mapping) < K * minimum:
        raise ValueError("shard below PBFT minimum: not enough W-Shard nodes")
    mapping = dict(mapping)
    members = [sorted(n for n, k in mapping.items() if k == s) for s in range(K)]
    for k in range(K):
        while len(members[k]) < minimum:
            donor = min(range(K), key=lambda s: (-len(members[s]), s))
            node = members[donor].pop()
            members[k].append(node)
            mapping[node] = k
    return mapping


@dataclass
class ConsensusOutcome:
    block: TXBlock
    delta: int
    votes: dict
    round_time: int


@dataclass
class ShardRuntime:
    shard: int
    nodes: list[Node]
    pool: deque
    ledger: ContributionLedger
    round_ms: int
    genesis_parent: bytes = EMPTY_ROOT
    chain: list[TXBlock] = field(default_factory=list)
    rounds: int = 0
    in_flight: Optional[ConsensusOutcome] = None
    busy_ms: float = 0.0          # round time weighted by block fill
    round_ms_total: int = 0
    slots: int = 0                # committed tx halves


def pbft_round(runtime: ShardRuntime, block: TXBlock, rng: random.Random,
               block_interval_ms: int) -> ConsensusOutcome:
    """One abstracted PBFT round.

    Every node draws whether it misbehaves this round. A misbehaving leader
    proposes an invalid block; followers then vote yes exactly when they
    misbehave. Under an honest leader, misbehaving followers vote no. The
    block commits iff yes votes (the leader's included) reach ceil(2n/3).
    Correct behavior is a yes vote on a committed block and a no vote on a
    failed one.
    """
    nodes = runtime.nodes
    n = len(nodes)
    if n < PBFT_MIN:
        raise ValueError("shard below PBFT minimum")
    leader = nodes[runtime.rounds % n].id
    bad = {node.id: rng.random() < node.behavior.malicious_prob for node in nodes}
    valid = not bad[leader]
    yes = {node.id: node.id == leader or (bad[node.id] != valid) for node in nodes}
    delta = 0 if sum(yes.values()) >= -(-2 * n // 3) else 1
    votes = {v: int(y) if delta == 0 else int(not y) for v, y in yes.items()}
    runtime.ledger.append(BehaviorRecord(
        runtime.rounds, len(block.txs), delta,
        {v: (e, Role.LEADER if v == leader else Role.FOLLOWER) for v, e in votes.items()}))
    runtime.rounds += 1
    return ConsensusOutcome(block, delta, votes, runtime.round_ms)


@dataclass
class EpochRecord:
    epoch: int
    node_allocation: bool
    account_allocation: bool
    nacv_aborted: bool
    var_s: float
    state_root: str


class World:
    """Mutable simulation state. ``run`` or ``process_epoch`` advance it."""

    def __init__(self, cfg: ExperimentConfig, trace: Sequence[TraceRecord],
                 scenario: str = "contribchain1", nacv_min_size: int = PBFT_MIN):
        problems = validate_config(cfg)
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))
        self.cfg = cfg
        self.scenario = get_scenario(scenario)
        self.K = cfg.K
        self.nacv_min_size = nacv_min_size
        self.clock = SimClock()
        self.nodes = {n.id: n for n in node_population(cfg)}
        self.node_ids = list(self.nodes)
        self.contrib = {n: genesis_contribution(cfg.mu, cfg.theta) for n in self.node_ids}
        self.mapping: dict[Address, int] = {}
        self.a_shard: list[Address] = []
        self.txs = schedule_injections(trace, cfg.inject_rate)
        self._inject_times = [t.inject_time for t in self.txs]
        self.next_inject = 0
        self.accounts: dict[Address, Account] = {}
        outflow: dict[Address, int] = {}
        for tx in self.txs:
            outflow[tx.sender] = outflow.get(tx.sender, 0) + tx.amount
        for addr in sorted(outflow):
            self._account(addr).credit(outflow[addr])
        self.genesis_balance = sum(outflow.values())
        self.relay_credit = 0
        self.pools = [deque() for _ in range(self.K)]
        self.runtimes: list[ShardRuntime] = []
        self.last_node_alloc: Optional[int] = None
        self.window_start = 0          # inject time where the account-allocation window opens
        self.epoch = 0
        self.s_height = 0
        # history for metrics
        self.injected = 0
        self.final: dict[int, tuple[int, int]] = {}   # seq -> (inject, final commit)
        self.origin_commits: dict[int, int] = {}
        self.relay_commits: dict[int, int] = {}
        self.intra_commits = 0
        self.cross_commits = 0
        self.queue_samples: list[tuple[int, list[int]]] = []
        self.epochs: list[EpochRecord] = []
        self.workload: list[list[int]] = []           # per epoch, committed halves per shard
        self.busy_ms = [0.0] * self.K
        self.round_stats = [[0, 0] for _ in range(self.K)]  # total round ms, rounds
        self.alloc_runtime: list[tuple[int, str, float]] = []
        self.blocks: list = []
        self.chains: dict[tuple[int, int], list[TXBlock]] = {}

    # -- accounts ---------------------------------------------------------

    def _account(self, addr: Address) -> Account:
        acct = self.accounts.get(addr)
        if acct is None:
            acct = Account(addr, 0, address_prefix_shard(addr, self.K))
            self.accounts[addr] = acct
        return acct

    def shard_of(self, addr: Address) -> int:
        return self._account(addr).shard

    def total_balance(self) -> int:
        return sum(a.balance for a in self.accounts.values())

    def conserved(self) -> bool:
        return self.total_balance() + self.relay_credit == self.genesis_balance

    def partition(self) -> dict[Address, int]:
        return {a: acct.shard for a, acct in self.accounts.items()}

    def pending(self) -> list[Transaction]:
        return [tx for pool in self.pools for tx in pool]

    # -- injection --------------------------------------------------------

    def inject(self, upto_ms: int) -> int:
        """Move every scheduled tx with inject_time <= upto_ms into its sender's pool."""
        n = 0
        while self.next_inject < len(self.txs) and self.txs[self.next_inject].inject_time <= upto_ms:
            tx = self.txs[self.next_inject]
            self._account(tx.recipient)
            self.pools[self.shard_of(tx.sender)].append(tx)
            self.next_inject += 1
            n += 1
        self.injected += n
        return n

    def _window(self, start_ms: int, end_ms: int) -> list[Transaction]:
        lo = bisect.bisect_left(self._inject_times, start_ms)
        hi = bisect.bisect_left(self._inject_times, end_ms)
        return self.txs[lo:hi]

    # -- phase 2 ----------------------------------------------------------

    def _shard_perf(self, mapping: dict[Address, int]) -> list[float]:
        perf = [0.0] * self.K
        for node, k in mapping.items():
            perf[k] += self.contrib[node].p
        return perf

    def _nacv_workloads(self, start_ms: int) -> list[float]:
        G = build_graph(self._window(max(0, start_ms - self.cfg.epoch_ms), start_ms))
        assign = {v: self.shard_of(v) for v in G.adj}
        loads = shard_loads(G, assign, self.K, self.cfg.beta)
        return [len(self.pools[k]) + loads[k] for k in range(self.K)]

    def _allocate_nodes(self, epoch: int, start_ms: int) -> bool:
        """Returns True when NACV aborted and account allocation must follow."""
        identities = establish_identities(self.node_ids, self.cfg.seed, epoch)
        owner = dict(zip(identities, self.node_ids))
        a_ids, w_ids = a_shard_select(identities, self.K)
        interval = {owner[i]: k for i, k in w_ids.items()}
        aborted = False
        if self.scenario.node_allocation == "nacv" and self.mapping:
            prev = {n: k for n, k in self.mapping.items() if n in interval}
            new = sorted(n for n in interval if n not in prev)
            deficit = sum(max(0, self.nacv_min_size - list(prev.values()).count(k))
                          for k in range(self.K))
            if deficit > len(new):
                prev = ensure_minimum(prev, self.K, self.nacv_min_size)
            s_avg, _ = averages(self.contrib, self.node_ids, ())
            _, p_avg = averages(self.contrib, (), interval)
            t0 = time.perf_counter()
            result = nacv(prev, self.contrib, self._nacv_workloads(start_ms), self.K,
                          NacvThresholds.from_config(self.cfg), f"{self.cfg.seed}/{epoch}",
                          new_nodes=new, s_avg=s_avg, p_avg=p_avg,
                          min_size=self.nacv_min_size)
            self.alloc_runtime.append((epoch, "nacv", (time.perf_counter() - t0) * 1000))
            mapping, aborted = result.mapping, result.aborted
        else:
            mapping = interval
        self.mapping = ensure_minimum(mapping, self.K)
        self.a_shard = sorted(owner[i] for i in a_ids)
        return aborted

    # -- phase 3 ----------------------------------------------------------

    def _allocate_accounts(self, epoch: int, start_ms: int) -> bool:
        window = self._window(self.window_start, start_ms)
        if not window:
            return False
        G = build_graph(window)
        perf = self._shard_perf(self.mapping)
        if any(p <= 0 for p in perf):
            log.warning("epoch %d: shard performance not positive %s; using equal shares",
                        epoch, perf)
            perf = [1.0] * self.K
        t0 = time.perf_counter()
        part = p_louvain(G, self.K, perf, self.cfg.beta)
        self.alloc_runtime.append((epoch, "p-louvain", (time.perf_counter() - t0) * 1000))
        for addr, k in part.assignment.items():
            self._account(addr).shard = k
        self.window_start = start_ms
        return True

    # -- phase 5 ----------------------------------------------------------

    def _commit(self, rt: ShardRuntime, outcome: ConsensusOutcome, t: int) -> None:
        block = outcome.block
        if outcome.delta:
            rt.pool.extendleft(reversed(block.txs))
            return
        rt.chain.append(block)
        rt.slots += len(block.txs)
        for tx in block.txs:
            tx.commit_time = t
            if tx.kind is TxKind.INTRA:
                self.accounts[tx.sender].debit(tx.amount)
                self.accounts[tx.recipient].credit(tx.amount)
                self.intra_commits += 1
                self.final[tx.seq] = (tx.inject_time, t)
            elif tx.kind is TxKind.CROSS_ORIGIN:
                self.accounts[tx.sender].debit(tx.amount)
                self.relay_credit += tx.amount
                self.cross_commits += 1
                self.origin_commits[tx.seq] = self.origin_commits.get(tx.seq, 0) + 1
                self.pools[self.shard_of(tx.recipient)].append(tx.relay_half())
            else:
                self.accounts[tx.recipient].credit(tx.amount)
                self.relay_credit -= tx.amount
                self.relay_commits[tx.seq] = self.relay_commits.get(tx.seq, 0) + 1
                self.final[tx.seq] = (tx.inject_time, t)

    def _propose(self, rt: ShardRuntime, epoch: int, rng: random.Random) -> ConsensusOutcome:
        txs = []
        while rt.pool and len(txs) < self.cfg.block_capacity:
            tx = rt.pool.popleft()
            if tx.kind is not TxKind.RELAY_HALF:
                cross = self.shard_of(tx.sender) != self.shard_of(tx.recipient)
                kind = TxKind.CROSS_ORIGIN if cross else TxKind.INTRA
                if kind is not tx.kind:
                    # Earlier blocks may hold this object; they must keep their payload.
                    tx = replace(tx, kind=kind)
            txs.append(tx)
        parent = rt.chain[-1].digest if rt.chain else rt.genesis_parent
        block = TXBlock(rt.shard, epoch, len(rt.chain), tuple(txs), parent)
        outcome = pbft_round(rt, block, rng, self.cfg.block_interval_ms)
        rt.round_ms_total += outcome.round_time
        rt.busy_ms += outcome.round_time * len(txs) / self.cfg.block_capacity
        return outcome

    def _produce_blocks(self, epoch: int, start: int, end: int) -> None:
        events = [(start, 0, k) for k in range(self.K)]
        step = self.cfg.block_interval_ms
        first_sample = -(-start // step) * step
        events += [(t, 1, -1) for t in range(first_sample, end, step)]
        heapq.heapify(events)
        rngs = [random.Random(f"pbft/{self.cfg.seed}/{epoch}/{k}") for k in range(self.K)]
        while events:
            t, kind, k = heapq.heappop(events)
            self.clock.advance(t)
            self.inject(t)
            if kind == 1:
                self.queue_samples.append((t, [len(p) for p in self.pools]))
                continue
            rt = self.runtimes[k]
            if rt.in_flight is not None:
                self._commit(rt, rt.in_flight, t)
                rt.in_flight = None
            if t + rt.round_ms <= end:
                rt.in_flight = self._propose(rt, epoch, rngs[k])
                heapq.heappush(events, (t + rt.round_ms, 0, k))

    # -- the epoch --------------------------------------------------------

    def process_epoch(self, epoch: int) -> EpochRecord:
        cfg = self.cfg
        start, end = epoch * cfg.epoch_ms, (epoch + 1) * cfg.epoch_ms
        self.clock.advance(start)
        self.inject(start)

        # Phases 1 and 2: identities and node allocation.
        node_alloc = (self.last_node_alloc is None
                      or start - self.last_node_alloc >= cfg.t_na_ms)
        aborted = False
        if node_alloc:
            aborted = self._allocate_nodes(epoch, start)
            self.last_node_alloc = start

        # Phase 3: account allocation.
        account_alloc = False
        if self.scenario.account_allocation == "plouvain" and (
                (epoch > 0 and epoch % cfg.f == 0) or aborted):
            account_alloc = self._allocate_accounts(epoch, start)

        # Phase 4: State Block; pending txs reload into their new shards.
        old = {k: list(pool) for k, pool in enumerate(self.pools)}
        state = build_state_block(epoch, self.mapping, self.partition(), old, self.contrib)
        self.pools = [deque(sorted(state.tx_reload.get(k, ()),
                                   key=lambda t: (t.inject_time, t.seq)))
                      for k in range(self.K)]
        self.blocks.append(state)
        self.s_height += 1
        state_digest = state.digest

        members = [sorted(n for n, k in self.mapping.items() if k == s) for s in range(self.K)]
        self.runtimes = []
        for k in range(self.K):
            nodes = [self.nodes[n] for n in members[k]]
            for node in nodes:
                node.shard = k
            round_ms = cfg.block_interval_ms + round(max(n.behavior.delay_ms for n in nodes))
            self.runtimes.append(ShardRuntime(
                k, nodes, self.pools[k], ContributionLedger(epoch, cfg.epoch_duration,
                                                            members=set(members[k])),
                round_ms, state_digest))
        for n in self.a_shard:
            self.nodes[n].shard = -1
        var_s = pvariance([exact_mean(self.contrib[n].s for n in m) for m in members])

        # Phase 5: block production.
        self._produce_blocks(epoch, start, end)
        self.clock.advance(end)

        # Phase 6: contributions and summary blocks.
        ledgers = [rt.ledger for rt in self.runtimes]
        stage = {}
        for rt in self.runtimes:
            perf = stage_performances(rt.ledger) if rt.ledger.records else {}
            stage[rt.shard] = {}
            for n in rt.ledger.members:
                try:
                    s = security_from_counts(rt.ledger.counters[n], cfg.mu, cfg.theta, cfg.lam)
                except NoEvidenceError:
                    continue
                stage[rt.shard][n] = Contribution(s, perf.get(n, 0.0))
        self.contrib = update_epoch(ledgers, self.contrib, cfg, self.a_shard)
        confirmed = [tx for rt in self.runtimes for b in rt.chain for tx in b.txs]
        shard_blocks, system = build_summary_blocks(
            epoch, self.K, self.s_height, stage,
            {rt.shard: list(rt.pool) for rt in self.runtimes},
            {rt.shard: rt.chain[-1].digest for rt in self.runtimes if rt.chain},
            self.contrib, confirmed)
        self.blocks.extend(b for rt in self.runtimes for b in rt.chain)
        self.blocks.extend(shard_blocks)
        self.blocks.append(system)
        self.s_height += 1

        for rt in self.runtimes:
            self.chains[(epoch, rt.shard)] = rt.chain
            self.busy_ms[rt.shard] += rt.busy_ms
            self.round_stats[rt.shard][0] += rt.round_ms_total
            self.round_stats[rt.shard][1] += rt.rounds
        self.workload.append([rt.slots for rt in self.runtimes])
        record = EpochRecord(epoch, node_alloc, account_alloc, aborted, var_s, state_digest.hex())
        self.epochs.append(record)
        self.epoch = epoch + 1
        return record

    def run(self, epochs: int) -> "World":
        for e in range(self.epoch, self.epoch + epochs):
            self.process_epoch(e)
        self.queue_samples.append((self.clock.now, [len(p) for p in self.pools]))
        return self

    # -- bookkeeping ------------------------------------------------------

    @property
    def duration_ms(self) -> int:
        return self.epoch * self.cfg.epoch_ms

    def queued(self) -> int:
        return sum(len(p) for p in self.pools)


def run_world(cfg: ExperimentConfig, trace: Sequence[TraceRecord], epochs: int,
              scenario: str = "contribchain1") -> World:
    return World(cfg, trace, scenario).run(epochs)


__all__ = [
    "PBFT_MIN", "Scenario", "SCENARIOS", "SimClock", "ShardRuntime", "ConsensusOutcome",
    "World", "establish_identities", "pbft_round", "schedule_injections", "ensure_minimum",
    "get_scenario", "run_world", "node_population", "StateBlock", "SystemSummaryBlock",
]
