"""Account allocation over the transaction graph.

The load a shard carries is modelled as one unit per intra-shard transaction
and ``beta / 2`` per cross-shard transaction endpoint it holds (a relayed
transaction costs a consensus slot on each side). A shard's processing time is
its load divided by its performance value, i.e. its estimated TPS.

P-Louvain runs Louvain community detection, pairs the largest communities with
the fastest shards, hands the remainder to whichever shard currently finishes
first, then refines by moving single boundary accounts while that lowers the
slower of the two shards involved.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .model import Address

log = logging.getLogger(__name__)

# Relative slack below which a move does not count as an improvement.
MOVE_TOLERANCE = 1e-12


@dataclass
class TransactionGraph:
    adj: dict[Address, dict[Address, int]]
    self_loops: dict[Address, int]

    @property
    def vertices(self) -> set[Address]:
        return set(self.adj)

    @property
    def edges(self) -> dict[tuple[Address, Address], int]:
        return {(a, b): w for a, nbrs in self.adj.items() for b, w in nbrs.items() if a < b}

    @property
    def vertex_load(self) -> dict[Address, int]:
        return {v: sum(nbrs.values()) + self.self_loops.get(v, 0) for v, nbrs in self.adj.items()}

    @property
    def total_edge_weight(self) -> int:
        return sum(sum(nbrs.values()) for nbrs in self.adj.values()) // 2

    @property
    def tx_count(self) -> int:
        return self.total_edge_weight + sum(self.self_loops.values())

    def __len__(self) -> int:
        return len(self.adj)


def _endpoints(tx) -> tuple[Address, Address]:
    sender = getattr(tx, "sender", None)
    if sender is None:
        return tx[0], tx[1]
    return sender, tx.recipient


def build_graph(txs: Iterable) -> TransactionGraph:
    adj: dict[Address, dict[Address, int]] = {}
    loops: dict[Address, int] = {}
    for tx in txs:
        a, b = _endpoints(tx)
        na = adj.setdefault(a, {})
        nb = adj.setdefault(b, {})
        if a == b:
            loops[a] = loops.get(a, 0) + 1
            continue
        na[b] = na.get(b, 0) + 1
        nb[a] = nb.get(a, 0) + 1
    return TransactionGraph(adj, loops)


def read_edge_csv(path: str | Path) -> TransactionGraph:
    """Load a ``from_hex,to_hex,weight`` edge list (weights summed per pair)."""
    adj: dict[Address, dict[Address, int]] = {}
    loops: dict[Address, int] = {}
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        for row in rows:
            if not row or row[0].strip().lower() in ("from", "from_hex"):
                continue
            a, b, w = Address.from_hex(row[0]), Address.from_hex(row[1]), int(row[2])
            if w <= 0:
                raise ValueError(f"non-positive weight in {path}: {row}")
            adj.setdefault(a, {})
            adj.setdefault(b, {})
            if a == b:
                loops[a] = loops.get(a, 0) + w
            else:
                adj[a][b] = adj[a].get(b, 0) + w
                adj[b][a] = adj[b].get(a, 0) + w
    return TransactionGraph(adj, loops)


def write_edge_csv(path: str | Path, G: TransactionGraph) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["from_hex", "to_hex", "weight"])
        for (a, b), w in sorted(G.edges.items()):
            out.writerow([a.to_hex(), b.to_hex(), w])
        for v, w in sorted(G.self_loops.items()):
            out.writerow([v.to_hex(), v.to_hex(), w])


# -- Louvain ----------------------------------------------------------------

def _local_moves(adj: list[dict[int, float]], loops: list[float],
                 resolution: float) -> tuple[list[int], bool]:
    n = len(adj)
    k = [sum(a.values()) + 2 * loops[i] for i, a in enumerate(adj)]
    m2 = sum(k)
    comm = list(range(n))
    if m2 == 0:
        return comm, False
    tot = k[:]
    moved_any = False
    while True:
        moves = 0
        for i in range(n):
            ci, ki = comm[i], k[i]
            links: dict[int, float] = {}
            for j, w in adj[i].items():
                cj = comm[j]
                links[cj] = links.get(cj, 0.0) + w
            tot[ci] -= ki
            best = ci
            best_gain = links.get(ci, 0.0) - resolution * tot[ci] * ki / m2
            for c, w in links.items():
                gain = w - resolution * tot[c] * ki / m2
                if gain > best_gain + 1e-12:
                    best, best_gain = c, gain
            tot[best] += ki
            if best != ci:
                comm[i] = best
                moves += 1
        if not moves:
            return comm, moved_any
        moved_any = True


def _aggregate(adj: list[dict[int, float]], loops: list[float], new_id: list[int],
               size: int) -> tuple[list[dict[int, float]], list[float]]:
    new_adj: list[dict[int, float]] = [{} for _ in range(size)]
    new_loops = [0.0] * size
    for i, nbrs in enumerate(adj):
        ci = new_id[i]
        new_loops[ci] += loops[i]
        row = new_adj[ci]
        for j, w in nbrs.items():
            cj = new_id[j]
            if ci == cj:
                new_loops[ci] += w / 2
            else:
                row[cj] = row.get(cj, 0.0) + w
    return new_adj, new_loops


def louvain(G: TransactionGraph, resolution: float = 1.0) -> list[list[Address]]:
    """Modularity-maximising communities; vertices are visited in ascending
    address order at every level, so the output is deterministic. Each
    community is an ascending list; communities are ordered by first member."""
    order = sorted(G.adj)
    if not order:
        raise ValueError("louvain needs a non-empty graph")
    index = {v: i for i, v in enumerate(order)}
    adj = [{index[u]: float(w) for u, w in G.adj[v].items()} for v in order]
    loops = [0.0] * len(order)
    member = list(range(len(order)))
    while True:
        comm, moved = _local_moves(adj, loops, resolution)
        if not moved:
            break
        labels: dict[int, int] = {}
        new_id = [labels.setdefault(c, len(labels)) for c in comm]
        member = [new_id[m] for m in member]
        adj, loops = _aggregate(adj, loops, new_id, len(labels))
    groups: dict[int, list[Address]] = defaultdict(list)
    for i, m in enumerate(member):
        groups[m].append(order[i])
    return sorted(groups.values(), key=lambda g: g[0])


def modularity(G: TransactionGraph, communities: Sequence[Iterable[Address]],
               resolution: float = 1.0) -> float:
    """Weighted modularity of a partition, ignoring self-payments."""
    m = G.total_edge_weight
    if m == 0:
        return 0.0
    where = {v: c for c, members in enumerate(communities) for v in members}
    inside = [0.0] * len(communities)
    degree = [0.0] * len(communities)
    for v, nbrs in G.adj.items():
        cv = where[v]
        for u, w in nbrs.items():
            degree[cv] += w
            if where[u] == cv:
                inside[cv] += w / 2
    return sum(inside[c] / m - resolution * (degree[c] / (2 * m)) ** 2
               for c in range(len(communities)))


# -- load model -------------------------------------------------------------

@dataclass
class AccountPartition:
    assignment: dict[Address, int]
    perf: list[float]
    loads: list[float]

    @property
    def K(self) -> int:
        return len(self.perf)

    @property
    def times(self) -> list[float]:
        return [load / p for load, p in zip(self.loads, self.perf)]

    @property
    def max_time(self) -> float:
        return max(self.times)

    @property
    def shards(self) -> list[set[Address]]:
        out: list[set[Address]] = [set() for _ in range(self.K)]
        for v, k in self.assignment.items():
            out[k].add(v)
        return out


def shard_load(members: set[Address], G: TransactionGraph, beta: float) -> float:
    load = 0.0
    for v in members:
        load += G.self_loops.get(v, 0)
        for u, w in G.adj.get(v, {}).items():
            if u in members:
                load += w / 2          # each intra edge is seen from both ends
            else:
                load += beta / 2 * w
    return load


def shard_loads(G: TransactionGraph, assignment: dict[Address, int], K: int,
                beta: float) -> list[float]:
    loads = [0.0] * K
    half = beta / 2
    for v, nbrs in G.adj.items():
        k = assignment[v]
        loads[k] += G.self_loops.get(v, 0)
        for u, w in nbrs.items():
            if assignment[u] == k:
                loads[k] += w / 2
            else:
                loads[k] += half * w
    return loads


def make_partition(G: TransactionGraph, assignment: dict[Address, int],
                   perf: Sequence[float], beta: float) -> AccountPartition:
    return AccountPartition(dict(assignment), list(perf),
                            shard_loads(G, assignment, len(perf), beta))


def cross_shard_ratio(G: TransactionGraph, assignment: dict[Address, int]) -> float:
    total = G.tx_count
    if not total:
        return 0.0
    cut = sum(w for (a, b), w in G.edges.items() if assignment[a] != assignment[b])
    return cut / total


def _check_perf(K: int, P: Sequence[float]) -> None:
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(P) != K:
        raise ValueError(f"expected {K} performance values, got {len(P)}")
    if any(p <= 0 for p in P):
        raise ValueError("shard performance values must be positive")


# -- P-Louvain phases -------------------------------------------------------

def _argmin_time(loads: Sequence[float], P: Sequence[float]) -> int:
    return min(range(len(P)), key=lambda k: (loads[k] / P[k], k))


def community_movement(communities: Sequence[Sequence[Address]], G: TransactionGraph,
                       P: Sequence[float], beta: float) -> AccountPartition:
    """Largest community to the fastest shard, one each for the first K; every
    further community joins the shard with the smallest current time."""
    K = len(P)
    _check_perf(K, P)
    vload = G.vertex_load
    comms = [sorted(c) for c in communities if c]
    if len(comms) < K and comms:
        # Atypical: pad by dealing the largest community's accounts round-robin.
        largest = max(range(len(comms)), key=lambda i: (sum(vload[v] for v in comms[i]), -i))
        members = comms.pop(largest)
        parts = K - len(comms)
        comms.extend(p for p in (members[i::parts] for i in range(parts)) if p)
    where = {v: ci for ci, c in enumerate(comms) for v in c}
    size = [sum(vload[v] for v in c) for c in comms]
    internal = [0.0] * len(comms)
    cross: list[dict[int, float]] = [defaultdict(float) for _ in comms]
    for v, nbrs in G.adj.items():
        cv = where[v]
        internal[cv] += G.self_loops.get(v, 0)
        for u, w in nbrs.items():
            cu = where[u]
            if cu == cv:
                internal[cv] += w / 2
            else:
                cross[cv][cu] += w
    order = sorted(range(len(comms)), key=lambda c: (-size[c], comms[c][0]))
    shard_order = sorted(range(K), key=lambda k: (-P[k], k))
    placed: dict[int, int] = {}
    loads = [0.0] * K
    half = beta / 2

    def place(c: int, k: int) -> None:
        loads[k] += internal[c]
        for other, w in cross[c].items():
            k2 = placed.get(other)
            if k2 is None:
                continue
            if k2 == k:
                loads[k] += w
            else:
                loads[k] += half * w
                loads[k2] += half * w
        placed[c] = k

    for rank, c in enumerate(order):
        place(c, shard_order[rank] if rank < K else _argmin_time(loads, P))
    assignment = {v: placed[where[v]] for v in G.adj}
    return AccountPartition(assignment, list(P), loads)


def _best_move(v: Address, G: TransactionGraph, assign: dict[Address, int],
               loads: Sequence[float], P: Sequence[float],
               beta: float) -> Optional[tuple[int, float, float]]:
    """Best single relocation of ``v`` to a neighbour's shard as
    (target, new_from_load, new_to_load), or None if nothing strictly helps."""
    a = assign[v]
    by_shard: dict[int, int] = {}
    for u, w in G.adj[v].items():
        b = assign[u]
        by_shard[b] = by_shard.get(b, 0) + w
    if not by_shard or (len(by_shard) == 1 and a in by_shard):
        return None
    half = beta / 2
    deg = sum(by_shard.values())
    own = G.self_loops.get(v, 0)
    w_a = by_shard.get(a, 0)
    t_a = loads[a] / P[a]
    r_max = 0.0
    best = None
    for b in sorted(by_shard):
        if b == a:
            continue
        w_b = by_shard[b]
        w_rest = deg - w_a - w_b
        # Edges to a become cut, edges to b become intra; edges elsewhere stay cut.
        new_a = loads[a] - own - w_a - half * (w_b + w_rest) + half * w_a
        new_b = loads[b] + own + w_b - half * w_b + half * (w_a + w_rest)
        old = max(t_a, loads[b] / P[b])
        reduction = old - max(new_a / P[a], new_b / P[b])
        if reduction > r_max + MOVE_TOLERANCE * old:
            r_max = reduction
            best = (b, new_a, new_b)
    return best


def account_movement(partition: AccountPartition, G: TransactionGraph, beta: float,
                     on_move: Optional[Callable[[Address, int, int, float], None]] = None
                     ) -> AccountPartition:
    """Relocate single accounts to neighbouring shards while that lowers the
    slower of the two shards involved.

    A worklist starts with every account in ascending order; a moved account
    re-flags its neighbours at the tail. Once the worklist drains, every
    boundary account is re-examined (moves elsewhere shift shard times too) and
    the loop resumes until no account can improve. ``on_move(v, from, to,
    max_time)`` is called after each move.
    """
    P = partition.perf
    assign = dict(partition.assignment)
    loads = list(partition.loads)
    order = sorted(G.adj)
    queue = deque(order)
    flagged = set(order)
    while queue:
        while queue:
            v = queue.popleft()
            flagged.discard(v)
            move = _best_move(v, G, assign, loads, P, beta)
            if move is None:
                continue
            b, new_a, new_b = move
            a = assign[v]
            assign[v] = b
            loads[a], loads[b] = new_a, new_b
            if on_move is not None:
                on_move(v, a, b, max(l / p for l, p in zip(loads, P)))
            for u in G.adj[v]:
                if u not in flagged:
                    flagged.add(u)
                    queue.append(u)
        for v in order:
            if _best_move(v, G, assign, loads, P, beta) is not None:
                flagged.add(v)
                queue.append(v)
    return AccountPartition(assign, list(P), loads)


def p_louvain(G: TransactionGraph, K: int, P: Sequence[float], beta: float = 2.0,
              on_move=None) -> AccountPartition:
    _check_perf(K, P)
    if not G.adj:
        return AccountPartition({}, list(P), [0.0] * K)
    if K == 1:
        return make_partition(G, dict.fromkeys(G.adj, 0), P, beta)
    partition = community_movement(louvain(G), G, P, beta)
    return account_movement(partition, G, beta, on_move)


@dataclass(frozen=True)
class Verification:
    accepted: bool
    witness: Optional[Address] = None


def improvable_accounts(G: TransactionGraph, partition: AccountPartition,
                        beta: float) -> list[Address]:
    return [v for v in sorted(G.adj)
            if _best_move(v, G, partition.assignment, partition.loads, partition.perf, beta)
            is not None]


def verify_allocation(G: TransactionGraph, partition: AccountPartition,
                      beta: float = 2.0) -> Verification:
    """Reject if any boundary account has a move that lowers max(t_from, t_to)."""
    loads = shard_loads(G, partition.assignment, partition.K, beta)
    for v in sorted(G.adj):
        if _best_move(v, G, partition.assignment, loads, partition.perf, beta) is not None:
            return Verification(False, v)
    return Verification(True)


# -- baselines --------------------------------------------------------------

def address_prefix_shard(addr: Address, K: int, digits: int = 8) -> int:
    """Shard from the leading hex digits of the address (160-bit form when it fits)."""
    width = 40 if addr < (1 << 160) else 64
    return int(format(int(addr), f"0{width}x")[:digits], 16) % K


def hash_allocation(G: TransactionGraph, K: int, P: Sequence[float],
                    beta: float = 2.0) -> AccountPartition:
    return make_partition(G, {v: address_prefix_shard(v, K) for v in G.adj}, P, beta)


def _bfs_order(G: TransactionGraph, members: Sequence[Address]) -> list[Address]:
    inside = set(members)
    vload = G.vertex_load
    remaining = sorted(members, key=lambda v: (-vload[v], v))
    seen: set[Address] = set()
    order: list[Address] = []
    for root in remaining:
        if root in seen:
            continue
        seen.add(root)
        frontier = deque([root])
        while frontier:
            v = frontier.popleft()
            order.append(v)
            for u in sorted(G.adj[v]):
                if u in inside and u not in seen:
                    seen.add(u)
                    frontier.append(u)
    return order


def louvain_greedy(G: TransactionGraph, K: int, P: Sequence[float],
                   beta: float = 2.0) -> AccountPartition:
    """Plain Louvain plus greedy size balancing, blind to shard performance.

    Communities go, largest first, to the shard with the least account
    activity. A community that would push that shard past an equal share of
    the total activity is split in breadth-first order from its busiest
    account, each account going to the currently least-loaded shard.
    """
    _check_perf(K, P)
    if not G.adj:
        return AccountPartition({}, list(P), [0.0] * K)
    vload = G.vertex_load
    capacity = -(-sum(vload.values()) // K)
    comms = louvain(G)
    sized = sorted(comms, key=lambda c: (-sum(vload[v] for v in c), c[0]))
    totals = [0] * K
    assignment: dict[Address, int] = {}

    def lightest() -> int:
        return min(range(K), key=lambda i: (totals[i], i))

    for c in sized:
        size = sum(vload[v] for v in c)
        k = lightest()
        if totals[k] + size <= capacity:
            totals[k] += size
            assignment.update(dict.fromkeys(c, k))
            continue
        for v in _bfs_order(G, c):
            k = lightest()
            totals[k] += vload[v]
            assignment[v] = k
    return make_partition(G, assignment, P, beta)


def write_partition_csv(path: str | Path, assignment: dict[Address, int]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["address", "shard_index"])
        for v in sorted(assignment):
            out.writerow([v.to_hex(), assignment[v]])


def read_partition_csv(path: str | Path) -> dict[Address, int]:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        next(rows, None)
        return {Address.from_hex(a): int(k) for a, k in rows}
