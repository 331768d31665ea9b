import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from shardsim.authstate import (EMPTY_ROOT, AuthenticatedMap, MerkleProof, OrphanAccountError,
                                ProofStep, StateBlock, TXBlock, build_state_block,
                                build_summary_blocks, chain_valid, contrib_map, dump_blocks,
                                map_root, rebucket, sha256, tx_map, verify)
from shardsim.contribution import Contribution
from shardsim.model import Address, Transaction, TxKind

from conftest import GOLDEN
from oracles import trie_root_ref


def random_items(seed, n, key_len=32):
    rng = random.Random(seed)
    return {rng.randbytes(key_len): rng.randbytes(rng.randint(1, 40)) for _ in range(n)}


def tx(seq, a, b, kind=TxKind.INTRA):
    return Transaction(seq, Address(a), Address(b), 5, seq * 10, None, kind)


def test_empty_map():
    m = AuthenticatedMap()
    assert m.root == EMPTY_ROOT == sha256(b"")
    assert len(m) == 0 and m.get(b"k") is None
    with pytest.raises(KeyError):
        m.prove(b"k")


def test_key_validation():
    with pytest.raises(TypeError):
        AuthenticatedMap().insert("text", b"v")
    with pytest.raises(ValueError):
        AuthenticatedMap().insert(b"x" * 65, b"v")


def test_root_matches_reference_and_is_order_free():
    items = random_items(1, 1000)
    ref = trie_root_ref(items)
    assert map_root(items) == ref
    keys = list(items)
    for seed in range(3):
        random.Random(seed).shuffle(keys)
        m = AuthenticatedMap()
        for k in keys:
            m = m.insert(k, items[k])
        assert m.root == ref
    assert sorted(AuthenticatedMap.from_items(items).items()) == sorted(items.items())


@settings(max_examples=80)
@given(st.dictionaries(st.binary(max_size=5), st.binary(min_size=1, max_size=6), max_size=40))
def test_reference_on_mixed_lengths(items):
    m = AuthenticatedMap.from_items(items)
    assert m.root == trie_root_ref(items)
    for k, v in items.items():
        assert m.get(k) == v
        assert verify(m.root, m.prove(k))


def test_overwrite_and_snapshot():
    m1 = AuthenticatedMap().insert(b"a", b"1")
    m2 = m1.insert(b"a", b"2")
    assert m1.get(b"a") == b"1" and m2.get(b"a") == b"2"
    assert len(m2) == 1 and m1.root != m2.root


def test_proofs_and_tampering():
    items = random_items(2, 1000)
    m = AuthenticatedMap.from_items(items)
    rng = random.Random(0)
    for k in rng.sample(sorted(items), 50):
        p = m.prove(k)
        assert verify(m.root, p)
        assert not verify(m.root, MerkleProof(p.key, p.value + b"x", p.steps))
        assert not verify(sha256(m.root), p)
        other = rng.choice(sorted(items))
        if other != k:
            assert not verify(m.root, MerkleProof(other, p.value, p.steps))
        step = p.steps[0]
        if step.kind == "branch":
            sibs = list(step.siblings)
            j = next(i for i, d in enumerate(sibs) if d and i != step.index)
            sibs[j] = sha256(sibs[j])
            bad = (ProofStep(step.kind, step.path, step.index, tuple(sibs), step.value),) + p.steps[1:]
            assert not verify(m.root, MerkleProof(p.key, p.value, bad))
        assert json.loads(p.to_json())["key"] == k.hex()
    assert not verify(m.root, MerkleProof(b"k", b"v", ()))


def test_block_roots_recompute():
    txs = tuple(tx(i, i + 1, i + 2) for i in range(20))
    b = TXBlock(0, 1, 0, txs, EMPTY_ROOT)
    assert b.tx_root == tx_map(txs).root
    assert b.digest == TXBlock(0, 1, 0, txs, EMPTY_ROOT).digest
    assert b.digest != TXBlock(0, 1, 0, txs[:-1], EMPTY_ROOT).digest
    assert b.digest != TXBlock(0, 1, 0, txs, EMPTY_ROOT, committed=False).digest
    c = TXBlock(0, 1, 1, (), b.digest)
    assert chain_valid([b, c]) and not chain_valid([c, b])
    assert not chain_valid([b, TXBlock(0, 1, 5, (), b.digest)])


def test_relay_halves_have_distinct_keys():
    t = tx(1, 1, 2, TxKind.CROSS_ORIGIN)
    assert len(tx_map([t, t.relay_half()])) == 2


def test_state_block_rebuckets_by_new_partition():
    partition = {Address(1): 0, Address(2): 1, Address(3): 1}
    pending = {0: [tx(1, 2, 1)], 1: [tx(2, 1, 3), tx(3, 1, 3, TxKind.RELAY_HALF)]}
    assert rebucket(pending, partition) == {0: (tx(2, 1, 3),),
                                            1: (tx(1, 2, 1), tx(3, 1, 3, TxKind.RELAY_HALF))}
    sb = build_state_block(4, {Address(9): 0}, partition, pending)
    assert sb.account_info_root == AuthenticatedMap.from_items(
        {a.to_bytes32(): (8).to_bytes(4, "big") + s.to_bytes(8, "big", signed=True)
         for a, s in partition.items()}).root
    assert sb.digest == StateBlock(4, {Address(9): 0}, partition, rebucket(pending, partition)).digest
    with pytest.raises(OrphanAccountError, match="orphan account"):
        build_state_block(4, {}, {Address(1): 0}, {0: [tx(1, 5, 1)]})


def test_summary_blocks():
    stage = {0: {Address(1): Contribution(0.9, 3.0)}, 1: {Address(2): Contribution(-0.3, 0.0)}}
    pending = {1: [tx(7, 2, 2)]}
    shards, system = build_summary_blocks(2, 2, 10, stage, pending, {0: b"\x01" * 32},
                                          {Address(1): Contribution(0.5, 1.0)}, [tx(6, 1, 1)])
    assert len(shards) == 2
    assert shards[0].stage_contrib_root == contrib_map(stage[0]).root
    assert shards[1].pending_tx_root == tx_map(pending[1]).root
    assert shards[0].pending_tx_root == EMPTY_ROOT
    assert system.latest_txblock_hashes == (b"\x01" * 32, EMPTY_ROOT)
    assert system.tx_pending_root == tx_map(pending[1]).root
    assert system.tx_confirm_root == tx_map([tx(6, 1, 1)]).root
    with pytest.raises(ValueError, match="missing shard ledger"):
        build_summary_blocks(2, 3, 10, stage, pending, {}, {}, [])


def golden_roots():
    rng = random.Random(2024)
    items = {rng.randbytes(32): rng.randbytes(16) for _ in range(1000)}
    txs = tuple(tx(i, i % 7 + 1, i % 5 + 1) for i in range(50))
    block = TXBlock(2, 3, 4, txs, EMPTY_ROOT)
    partition = {Address(i): i % 3 for i in range(1, 8)}
    state = build_state_block(3, {Address(100 + i): i % 3 for i in range(12)}, partition,
                              {0: txs[:10]}, {Address(100): Contribution(0.1, 0.0)})
    return {
        "empty": EMPTY_ROOT.hex(),
        "map_1000": map_root(items).hex(),
        "txblock": block.digest.hex(),
        "state_block": state.digest.hex(),
    }


def test_golden_roots_stable():
    expected = json.loads((GOLDEN / "roots.json").read_text())
    assert golden_roots() == expected


def test_dump_blocks(tmp_path):
    b = TXBlock(0, 0, 0, (tx(1, 1, 2),), EMPTY_ROOT)
    dump_blocks(tmp_path / "b.jsonl", [b, b])
    lines = (tmp_path / "b.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["hash"] == b.digest.hex()
