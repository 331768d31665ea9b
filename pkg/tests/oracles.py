"""Independent reference computations used by the tests.

Written directly from the formulas with exact rational arithmetic and without
calling into the package's own helpers.
"""

from fractions import Fraction
from itertools import combinations
from math import comb


def stage_performance_ref(records, node, t_e):
    """records: list of (tx_count, delta, {node: (e, is_leader)})."""
    total = Fraction(0)
    for tx, delta, per in records:
        n = len(per)
        n_r = sum(e for e, _ in per.values())
        e = per[node][0]
        total += Fraction(tx, n_r) * e
        if delta and not e:
            total -= Fraction(tx, n - n_r)
    return total / Fraction(t_e)


def shard_tps_ref(records, t_e):
    return Fraction(sum(tx for tx, delta, _ in records if not delta)) / Fraction(t_e)


def stage_security_ref(records, node, mu, theta, lam):
    mu, theta, lam = Fraction(mu), Fraction(theta), Fraction(lam)
    mr = mw = fr = fw = 0
    for _, _, per in records:
        e, leader = per[node]
        if leader:
            mr, mw = mr + e, mw + (1 - e)
        else:
            fr, fw = fr + e, fw + (1 - e)
    weight_right = lam * mr + fr
    weight_wrong = lam * mw + fw
    return (mu * weight_right - theta * weight_wrong) / (weight_right + weight_wrong)


def committee_failure_enumerated(n, n_a, malicious):
    """Fraction of all size-n_a committees holding at least ceil(n_a/3) malicious members."""
    bad = set(range(malicious))
    need = -(-n_a // 3)
    hits = sum(1 for c in combinations(range(n), n_a) if len(bad.intersection(c)) >= need)
    return Fraction(hits, comb(n, n_a))


def variance(xs):
    m = sum(xs) / len(xs)
    return sum((x - m) ** 2 for x in xs) / len(xs)


def loads_ref(edges, self_loops, assignment, K, beta):
    """Shard loads straight from an edge list: intra edge 1, cut edge beta/2 per side."""
    loads = [Fraction(0)] * K
    half = Fraction(beta) / 2
    for (a, b), w in edges.items():
        if assignment[a] == assignment[b]:
            loads[assignment[a]] += w
        else:
            loads[assignment[a]] += half * w
            loads[assignment[b]] += half * w
    for v, w in self_loops.items():
        loads[assignment[v]] += w
    return loads


def improving_move_exists(edges, self_loops, adj, assignment, perf, beta, rel=1e-9):
    """Brute force: can any account move to a neighbour's shard and lower the
    slower of its old and new shard?"""
    K = len(perf)
    base = loads_ref(edges, self_loops, assignment, K, beta)
    for v in adj:
        a = assignment[v]
        for b in {assignment[u] for u in adj[v]} - {a}:
            trial = dict(assignment)
            trial[v] = b
            new = loads_ref(edges, self_loops, trial, K, beta)
            old = max(base[a] / Fraction(perf[a]), base[b] / Fraction(perf[b]))
            after = max(new[a] / Fraction(perf[a]), new[b] / Fraction(perf[b]))
            if old - after > rel * old:
                return True
    return False


def _h(data):
    import hashlib
    return hashlib.sha256(data).digest()


def _lp(data):
    return len(data).to_bytes(4, "big") + data


def trie_root_ref(items):
    """Root of the hex trie built top-down from the documented node hashing."""
    if not items:
        return _h(b"")
    entries = []
    for k, v in items.items():
        nib = bytes(x for b in k for x in (b >> 4, b & 15))
        entries.append((nib, v))
    return _node_ref(entries)


def _node_ref(entries):
    if len(entries) == 1:
        path, value = entries[0]
        return _h(b"\x00" + _lp(path) + _lp(value))
    paths = [p for p, _ in entries]
    cp = 0
    while all(len(p) > cp for p in paths) and len({p[cp] for p in paths}) == 1:
        cp += 1
    if cp:
        child = _node_ref([(p[cp:], v) for p, v in entries])
        return _h(b"\x01" + _lp(paths[0][:cp]) + child)
    value = None
    groups = {}
    for p, v in entries:
        if not p:
            value = v
        else:
            groups.setdefault(p[0], []).append((p[1:], v))
    kids = b"".join(_lp(_node_ref(groups[i]) if i in groups else b"") for i in range(16))
    return _h(b"\x02" + kids + _lp(b"\x00" if value is None else b"\x01" + value))
