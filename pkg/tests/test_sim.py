import math
import random
from collections import deque

import pytest

from shardsim.config import default_config
from shardsim.contribution import ContributionLedger, Role, shard_epoch_tps, stage_performances
from shardsim.model import Address, BehaviorProfile, Node, TxKind
from shardsim.authstate import TXBlock, chain_valid
from shardsim.plouvain import address_prefix_shard
from shardsim.authstate import StateBlock
from shardsim.sim import (PBFT_MIN, ShardRuntime, SimClock, World, ensure_minimum,
                          establish_identities, get_scenario, node_population, pbft_round,
                          schedule_injections)
from shardsim.workload import TraceRecord, Uniform, synth_trace

SMALL = default_config().replace(K=2, nodes_per_shard=6, epoch_duration=20.0,
                                 block_interval=1.0, block_capacity=50, inject_rate=10.0,
                                 T_NA=20.0, f=2)

A_LOW, B_LOW = Address(1), Address(2)          # both in prefix shard 0 of 2
C_HIGH = Address(1 << 128)                     # prefix shard 1 of 2


def make_runtime(probs, delays=None):
    nodes = [Node(Address(i + 1), 0, 0.0, 0.0,
                  BehaviorProfile(0, p, (delays or [0] * len(probs))[i]))
             for i, p in enumerate(probs)]
    ledger = ContributionLedger(0, 10.0, members={n.id for n in nodes})
    return ShardRuntime(0, nodes, deque(), ledger, 1000)


def honest(world):
    for node in world.nodes.values():
        node.behavior = BehaviorProfile(0, 0.0, node.behavior.delay_ms)
    return world


def test_identities():
    ids = [Address(i) for i in range(20)]
    a = establish_identities(ids, 7, 0)
    assert a == establish_identities(ids, 7, 0)
    assert not set(a) & set(establish_identities(ids, 7, 1))
    assert len(set(a)) == 20
    assert establish_identities([], 7, 0) == []


def test_clock_is_monotone():
    c = SimClock()
    c.advance(5)
    c.advance(5)
    with pytest.raises(ValueError):
        c.advance(4)


def test_scenarios():
    assert get_scenario("contribchain1").node_allocation == "nacv"
    assert get_scenario("monoxide-hash").account_allocation == "hash"
    with pytest.raises(ValueError, match="disabled"):
        get_scenario("clpa")
    with pytest.raises(ValueError, match="unknown scenario"):
        get_scenario("nope")


def test_pbft_all_honest():
    rt = make_runtime([0.0] * 4)
    out = pbft_round(rt, TXBlock(0, 0, 0, (), b""), random.Random(0), 1000)
    assert out.delta == 0 and set(out.votes.values()) == {1}
    rec = rt.ledger.records[0]
    assert sum(role is Role.LEADER for _, role in rec.per_node.values()) == 1
    assert rec.per_node[Address(1)][1] is Role.LEADER


def test_pbft_third_wrong_fails():
    # two of four followers always misbehave: 2 yes votes < ceil(8/3) = 3
    rt = make_runtime([0.0, 0.0, 1.0, 1.0])
    out = pbft_round(rt, TXBlock(0, 0, 0, (), b""), random.Random(0), 1000)
    assert out.delta == 1
    # on a failed block the correct behavior is a no vote
    assert out.votes == {Address(1): 0, Address(2): 0, Address(3): 1, Address(4): 1}


def test_pbft_round_time_and_minimum():
    rt = make_runtime([0.0] * 5, delays=[0, 10, 40, 20, 0])
    rt.round_ms = 1000 + 40
    assert pbft_round(rt, TXBlock(0, 0, 0, (), b""), random.Random(0), 1000).round_time == 1040
    with pytest.raises(ValueError, match="shard below PBFT minimum"):
        pbft_round(make_runtime([0.0] * 3), TXBlock(0, 0, 0, (), b""), random.Random(0), 1000)


def test_pbft_leader_rotation():
    rt = make_runtime([0.0] * 4)
    for _ in range(8):
        pbft_round(rt, TXBlock(0, 0, 0, (), b""), random.Random(0), 1000)
    leaders = [next(v for v, (_, r) in rec.per_node.items() if r is Role.LEADER)
               for rec in rt.ledger.records]
    assert leaders == [Address(i % 4 + 1) for i in range(8)]


def test_setting1_failure_rate_binomial():
    # one node at 5%: a round fails exactly when it leads and misbehaves
    n, rounds, p = 8, 1000, 0.05
    rt = make_runtime([p] + [0.0] * (n - 1))
    rng = random.Random(11)
    fails = sum(pbft_round(rt, TXBlock(0, 0, 0, (), b""), rng, 1000).delta for _ in range(rounds))
    q = p / n
    assert abs(fails - rounds * q) <= 3 * math.sqrt(rounds * q * (1 - q))


def test_population_follows_setting():
    cfg = default_config().replace(K=2, nodes_per_shard=4, table1_setting=4)
    nodes = node_population(cfg)
    assert len(nodes) == 12
    bad = [sum(n.behavior.malicious_prob > 0 for n in nodes[j * 4:(j + 1) * 4]) for j in range(3)]
    assert bad == [0, 1, 2]
    assert [n.behavior.delay_ms for n in nodes[4:8]] == [200, 210, 220, 230]


def test_injection_schedule():
    trace = synth_trace(Uniform(50), 10_000, seed=0)
    txs = schedule_injections(trace, 2000)
    assert len(txs) == 10_000 and txs[-1].inject_time < 5000
    assert schedule_injections(trace * 50, 2500)[-1].inject_time == 199_999
    assert schedule_injections([], 5) == []
    with pytest.raises(ValueError):
        schedule_injections(trace, 0)


def test_ensure_minimum():
    m = {Address(i): 0 for i in range(10)}
    m[Address(99)] = 1
    out = ensure_minimum(m, 2)
    assert sorted(out.values()).count(1) == PBFT_MIN
    assert out[Address(9)] == 1                 # highest address of the largest shard moves first
    with pytest.raises(ValueError, match="PBFT minimum"):
        ensure_minimum({Address(i): 0 for i in range(7)}, 2)


def test_zero_transactions():
    w = World(SMALL, []).run(2)
    assert w.injected == 0 and not w.final
    assert all(c.p == 0.0 for c in w.contrib.values())
    assert w.conserved()


def test_single_intra_tx():
    assert address_prefix_shard(A_LOW, 2) == address_prefix_shard(B_LOW, 2) == 0
    w = honest(World(SMALL, [TraceRecord(A_LOW, B_LOW, 3)]))
    w.run(1)
    inject, commit = w.final[0]
    assert commit - inject <= SMALL.block_interval_ms + max(
        n.behavior.delay_ms for n in w.nodes.values())
    assert w.accounts[B_LOW].balance == 3 and w.accounts[A_LOW].balance == 0
    assert w.intra_commits == 1 and w.cross_commits == 0 and not w.relay_commits


def test_single_cross_tx():
    assert address_prefix_shard(C_HIGH, 2) == 1
    w = honest(World(SMALL, [TraceRecord(A_LOW, C_HIGH, 4)]))
    w.run(1)
    assert w.origin_commits == {0: 1} and w.relay_commits == {0: 1}
    per_shard = {k: [t for b in w.chains[(0, k)] for t in b.txs if t.seq == 0] for k in range(2)}
    assert [t.kind for t in per_shard[0]] == [TxKind.CROSS_ORIGIN]
    assert [t.kind for t in per_shard[1]] == [TxKind.RELAY_HALF]
    assert w.accounts[C_HIGH].balance == 4 and w.relay_credit == 0
    assert w.final[0][1] - w.final[0][0] <= 2 * SMALL.block_interval_ms


def test_world_invariants_and_determinism():
    trace = synth_trace(Uniform(300), 1500, seed=5)
    cfg = SMALL.replace(table1_setting=4, inject_rate=60.0)
    w = World(cfg, trace).run(4)
    assert w.conserved()
    # each injected tx is either final or has exactly one half waiting in a pool
    assert w.injected == len(w.final) + w.queued()
    assert len({t.seq for t in w.pending()}) == w.queued()
    assert all(v == 1 for v in w.origin_commits.values())
    assert all(v == 1 for v in w.relay_commits.values())
    assert set(w.relay_commits) <= set(w.origin_commits)
    for (e, k), chain in w.chains.items():
        assert all(len(b.txs) <= cfg.block_capacity for b in chain)
        assert chain_valid(chain, chain[0].parent if chain else b"")
    for pool_k, pool in enumerate(w.pools):
        for t in pool:
            owner = t.recipient if t.kind is TxKind.RELAY_HALF else t.sender
            assert w.shard_of(owner) == pool_k
    again = World(cfg, trace).run(4)
    assert [e.state_root for e in again.epochs] == [e.state_root for e in w.epochs]
    assert again.final == w.final


def test_ledgers_satisfy_tps_identity():
    trace = synth_trace(Uniform(200), 800, seed=2)
    w = World(SMALL.replace(table1_setting=5, inject_rate=40.0), trace)
    w.run(1)
    for rt in w.runtimes:
        if rt.ledger.records:
            total = sum(stage_performances(rt.ledger).values())
            assert total == pytest.approx(shard_epoch_tps(rt.ledger), rel=1e-9, abs=1e-9)


def test_invalid_config_rejected():
    with pytest.raises(ValueError, match="invalid config"):
        World(SMALL.replace(theta=0.5), [])


def test_block_payloads_stay_fixed_after_the_run():
    trace = synth_trace(Uniform(300), 1500, seed=8)
    w = World(SMALL.replace(table1_setting=4, inject_rate=60.0, f=1), trace).run(4)
    fresh = {
        StateBlock: lambda b: StateBlock(b.epoch, b.node_mapping, b.account_partition,
                                         b.tx_reload, b.contributions),
        TXBlock: lambda b: TXBlock(b.shard, b.epoch, b.height, b.txs, b.parent, b.committed),
    }
    checked = 0
    for b in w.blocks:
        if type(b) in fresh:
            assert fresh[type(b)](b).digest == b.digest
            checked += 1
    assert checked > 8
