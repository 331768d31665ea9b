"""Authenticated key-value trie and the block structures that commit to it.

Hashing
-------
Digests are SHA-256. Every field that enters a digest is length-prefixed with
a 4-byte big-endian length. Trie nodes hash as::

    leaf       sha256(0x00 | lp(nibbles) | lp(value))
    extension  sha256(0x01 | lp(nibbles) | child_digest)
    branch     sha256(0x02 | lp(child_0) ... lp(child_15) | lp(value_flag + value))

Nibbles are stored one per byte. An absent branch child is ``lp(b"")``; the
branch value field is ``b"\\x00"`` when absent and ``b"\\x01" + value`` when
present. The empty map's root is ``sha256(b"")``.

Blocks hash their header fields in declared order, each length-prefixed, after
a one-byte block tag (TX-Block 0x10, shard summary 0x11, system summary 0x12,
state 0x13). Integers are 8-byte big-endian signed; reals are IEEE-754 doubles.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .contribution import Contribution
from .model import Address, Transaction, TxKind

MAX_KEY_BYTES = 64


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def lp(data: bytes) -> bytes:
    return len(data).to_bytes(4, "big") + data


def enc_int(v: int) -> bytes:
    return int(v).to_bytes(8, "big", signed=True)


def enc_real(v: float) -> bytes:
    return struct.pack(">d", v)


EMPTY_ROOT = sha256(b"")


# -- trie nodes ---------------------------------------------------------------

@dataclass(frozen=True)
class Leaf:
    path: bytes
    value: bytes
    digest: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "digest", sha256(b"\x00" + lp(self.path) + lp(self.value)))


@dataclass(frozen=True)
class Extension:
    path: bytes
    child: "Node"
    digest: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        assert self.path and isinstance(self.child, Branch)
        object.__setattr__(self, "digest", sha256(b"\x01" + lp(self.path) + self.child.digest))


def _branch_digest(child_digests: Sequence[Optional[bytes]], value: Optional[bytes]) -> bytes:
    body = b"".join(lp(d or b"") for d in child_digests)
    flag = b"\x00" if value is None else b"\x01" + value
    return sha256(b"\x02" + body + lp(flag))


@dataclass(frozen=True)
class Branch:
    children: tuple
    value: Optional[bytes] = None
    digest: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "digest", _branch_digest(
            [c.digest if c is not None else None for c in self.children], self.value))


Node = Union[Leaf, Extension, Branch]
_NO_CHILDREN = (None,) * 16


def nibbles(key: bytes) -> bytes:
    out = bytearray()
    for b in key:
        out += bytes((b >> 4, b & 15))
    return bytes(out)


def _common(a: bytes, b: bytes) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def _wrap(prefix: bytes, branch: Branch) -> Node:
    return Extension(prefix, branch) if prefix else branch


def _split(prefix: bytes, entries: list[tuple[bytes, Union[Node, bytes]]]) -> Node:
    """Branch on ``entries`` (remaining path, subtree-or-value) under ``prefix``."""
    children = list(_NO_CHILDREN)
    value = None
    for rest, item in entries:
        if not rest:
            value = item
        elif isinstance(item, bytes):
            children[rest[0]] = Leaf(rest[1:], item)
        else:
            children[rest[0]] = item if len(rest) == 1 else Extension(rest[1:], item)
    return _wrap(prefix, Branch(tuple(children), value))


def _insert(node: Optional[Node], path: bytes, value: bytes) -> Node:
    if node is None:
        return Leaf(path, value)
    if isinstance(node, Leaf):
        if node.path == path:
            return Leaf(path, value)
        c = _common(node.path, path)
        return _split(path[:c], [(node.path[c:], node.value), (path[c:], value)])
    if isinstance(node, Extension):
        c = _common(node.path, path)
        if c == len(node.path):
            return Extension(node.path, _insert(node.child, path[c:], value))
        return _split(path[:c], [(node.path[c:], node.child), (path[c:], value)])
    if not path:
        return Branch(node.children, value)
    children = list(node.children)
    children[path[0]] = _insert(children[path[0]], path[1:], value)
    return Branch(tuple(children), node.value)


def _build(entries: list[tuple[bytes, bytes]], depth: int) -> Optional[Node]:
    """Bulk build from entries sorted by path; same shape as repeated insertion."""
    if not entries:
        return None
    if len(entries) == 1:
        return Leaf(entries[0][0][depth:], entries[0][1])
    first, last = entries[0][0], entries[-1][0]
    c = _common(first[depth:], last[depth:])
    at = depth + c
    value = None
    children = list(_NO_CHILDREN)
    i = 0
    if len(entries[0][0]) == at:
        value = entries[0][1]
        i = 1
    while i < len(entries):
        nib = entries[i][0][at]
        j = i
        while j < len(entries) and entries[j][0][at] == nib:
            j += 1
        children[nib] = _build(entries[i:j], at + 1)
        i = j
    return _wrap(first[depth:at], Branch(tuple(children), value))


def _check_key(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)):
        raise TypeError("keys are byte strings")
    if len(key) > MAX_KEY_BYTES:
        raise ValueError(f"key longer than {MAX_KEY_BYTES} bytes")


# -- proofs -------------------------------------------------------------------

@dataclass(frozen=True)
class ProofStep:
    """One node on the path from the root.

    ``kind`` is "leaf", "extension" or "branch". For a branch, ``index`` is the
    child taken (-1 when the key ends at the branch) and ``siblings`` holds all
    16 child digests with the taken slot left empty.
    """

    kind: str
    path: bytes = b""
    index: int = -1
    siblings: tuple = ()
    value: Optional[bytes] = None   # branch value when not the proven one


@dataclass(frozen=True)
class MerkleProof:
    key: bytes
    value: bytes
    steps: tuple

    def to_json(self) -> str:
        steps = [{"kind": s.kind, "path": s.path.hex(), "index": s.index,
                  "siblings": [d.hex() if d else None for d in s.siblings],
                  "value": None if s.value is None else s.value.hex()} for s in self.steps]
        return json.dumps({"key": self.key.hex(), "value": self.value.hex(), "steps": steps})


def verify(root: bytes, proof: MerkleProof) -> bool:
    try:
        return _recompute(proof) == root
    except (ValueError, IndexError, TypeError, AssertionError):
        return False


def _recompute(proof: MerkleProof) -> bytes:
    rest = nibbles(proof.key)
    steps = proof.steps
    if not steps:
        raise ValueError("empty proof")
    for i, step in enumerate(steps):
        last = i == len(steps) - 1
        if step.kind == "extension":
            if last or rest[:len(step.path)] != step.path or not step.path:
                raise ValueError("extension mismatch")
            rest = rest[len(step.path):]
        elif step.kind == "branch":
            if len(step.siblings) != 16:
                raise ValueError("branch arity")
            if step.index == -1:
                if not last or rest:
                    raise ValueError("key does not end here")
            else:
                if last or not rest or rest[0] != step.index or step.siblings[step.index]:
                    raise ValueError("branch mismatch")
                rest = rest[1:]
        elif step.kind == "leaf":
            if not last or rest != step.path:
                raise ValueError("leaf mismatch")
            rest = b""
        else:
            raise ValueError(f"unknown step {step.kind!r}")
    digest = b""
    for step in reversed(steps):
        if step.kind == "leaf":
            digest = sha256(b"\x00" + lp(step.path) + lp(proof.value))
        elif step.kind == "extension":
            digest = sha256(b"\x01" + lp(step.path) + digest)
        elif step.index == -1:
            digest = _branch_digest(step.siblings, proof.value)
        else:
            kids = list(step.siblings)
            kids[step.index] = digest
            digest = _branch_digest(kids, step.value)
    return digest


# -- the map ------------------------------------------------------------------

class AuthenticatedMap:
    """Immutable authenticated map; ``insert`` returns a new snapshot sharing structure."""

    __slots__ = ("_root", "_size")

    def __init__(self, _root: Optional[Node] = None, _size: int = 0):
        self._root = _root
        self._size = _size

    @classmethod
    def from_items(cls, items: Union[Mapping[bytes, bytes], Iterable[tuple[bytes, bytes]]]
                   ) -> "AuthenticatedMap":
        pairs = dict(items.items() if isinstance(items, Mapping) else items)
        for k in pairs:
            _check_key(k)
        entries = sorted((nibbles(k), v) for k, v in pairs.items())
        return cls(_build(entries, 0), len(entries))

    def insert(self, key: bytes, value: bytes) -> "AuthenticatedMap":
        _check_key(key)
        size = self._size + (self.get(key) is None)
        return AuthenticatedMap(_insert(self._root, nibbles(bytes(key)), bytes(value)), size)

    def get(self, key: bytes) -> Optional[bytes]:
        """Value under ``key`` or None when absent."""
        _check_key(key)
        node, rest = self._root, nibbles(key)
        while node is not None:
            if isinstance(node, Leaf):
                return node.value if node.path == rest else None
            if isinstance(node, Extension):
                if rest[:len(node.path)] != node.path:
                    return None
                node, rest = node.child, rest[len(node.path):]
            elif not rest:
                return node.value
            else:
                node, rest = node.children[rest[0]], rest[1:]
        return None

    def __len__(self) -> int:
        return self._size

    def __contains__(self, key: bytes) -> bool:
        return self.get(key) is not None

    @property
    def root(self) -> bytes:
        return EMPTY_ROOT if self._root is None else self._root.digest

    def items(self) -> list[tuple[bytes, bytes]]:
        out: list[tuple[bytes, bytes]] = []

        def walk(node, prefix: bytes) -> None:
            if node is None:
                return
            if isinstance(node, Leaf):
                out.append((prefix + node.path, node.value))
            elif isinstance(node, Extension):
                walk(node.child, prefix + node.path)
            else:
                if node.value is not None:
                    out.append((prefix, node.value))
                for i, c in enumerate(node.children):
                    walk(c, prefix + bytes((i,)))

        walk(self._root, b"")
        return [(bytes((p[i] << 4) | p[i + 1] for i in range(0, len(p), 2)), v)
                for p, v in out]

    def prove(self, key: bytes) -> MerkleProof:
        _check_key(key)
        steps: list[ProofStep] = []
        node, rest = self._root, nibbles(key)
        while node is not None:
            if isinstance(node, Leaf):
                if node.path != rest:
                    break
                steps.append(ProofStep("leaf", node.path))
                return MerkleProof(bytes(key), node.value, tuple(steps))
            if isinstance(node, Extension):
                if rest[:len(node.path)] != node.path:
                    break
                steps.append(ProofStep("extension", node.path))
                node, rest = node.child, rest[len(node.path):]
                continue
            digests = [c.digest if c is not None else None for c in node.children]
            if not rest:
                if node.value is None:
                    break
                steps.append(ProofStep("branch", index=-1, siblings=tuple(digests)))
                return MerkleProof(bytes(key), node.value, tuple(steps))
            i = rest[0]
            digests[i] = None
            steps.append(ProofStep("branch", index=i, siblings=tuple(digests), value=node.value))
            node, rest = node.children[i], rest[1:]
        raise KeyError(f"key {key.hex()} absent")


def map_root(items: Mapping[bytes, bytes]) -> bytes:
    return AuthenticatedMap.from_items(items).root


# -- payload encodings --------------------------------------------------------

def tx_key(tx: Transaction) -> bytes:
    """Digest identifying a tx half; the kind separates an origin from its relay."""
    return sha256(lp(tx.encode()) + lp(tx.kind.value.encode()))


def tx_value(tx: Transaction) -> bytes:
    return lp(tx.encode()) + lp(tx.kind.value.encode())


def contrib_value(c: Contribution) -> bytes:
    return lp(enc_real(c.s)) + lp(enc_real(c.p))


def tx_map(txs: Iterable[Transaction]) -> AuthenticatedMap:
    return AuthenticatedMap.from_items({tx_key(t): tx_value(t) for t in txs})


def contrib_map(contribs: Mapping[Address, Contribution]) -> AuthenticatedMap:
    return AuthenticatedMap.from_items({a.to_bytes32(): contrib_value(c)
                                        for a, c in contribs.items()})


# -- blocks -------------------------------------------------------------------

def _header_hash(tag: int, *fields: bytes) -> bytes:
    return sha256(bytes((tag,)) + b"".join(lp(f) for f in fields))


@dataclass(frozen=True)
class TXBlock:
    shard: int
    epoch: int
    height: int
    txs: tuple
    parent: bytes
    committed: bool = True

    @cached_property
    def tx_root(self) -> bytes:
        return tx_map(self.txs).root

    @cached_property
    def digest(self) -> bytes:
        return _header_hash(0x10, enc_int(self.shard), enc_int(self.epoch), enc_int(self.height),
                            self.parent, self.tx_root, bytes((int(self.committed),)))

    def record(self) -> dict:
        return {"type": "tx_block", "shard": self.shard, "epoch": self.epoch,
                "height": self.height, "parent": self.parent.hex(),
                "tx_root": self.tx_root.hex(), "tx_count": len(self.txs),
                "committed": self.committed, "hash": self.digest.hex()}


def chain_valid(blocks: Sequence[TXBlock], genesis_parent: bytes = EMPTY_ROOT) -> bool:
    parent = genesis_parent
    for i, b in enumerate(blocks):
        if b.parent != parent or (i and b.height != blocks[i - 1].height + 1):
            return False
        parent = b.digest
    return True


@dataclass(frozen=True)
class ShardSummaryBlock:
    shard: int
    epoch: int
    stage_contributions: Mapping[Address, Contribution]
    pending: tuple

    @cached_property
    def stage_contrib_root(self) -> bytes:
        return contrib_map(self.stage_contributions).root

    @cached_property
    def pending_tx_root(self) -> bytes:
        return tx_map(self.pending).root

    @cached_property
    def digest(self) -> bytes:
        return _header_hash(0x11, enc_int(self.shard), enc_int(self.epoch),
                            self.stage_contrib_root, self.pending_tx_root)

    def record(self) -> dict:
        return {"type": "shard_summary", "shard": self.shard, "epoch": self.epoch,
                "stage_contrib_root": self.stage_contrib_root.hex(),
                "pending_tx_root": self.pending_tx_root.hex(),
                "pending_count": len(self.pending), "hash": self.digest.hex()}


@dataclass(frozen=True)
class SystemSummaryBlock:
    epoch: int
    height: int
    latest_txblock_hashes: tuple
    global_contrib_root: bytes
    tx_confirm_root: bytes
    tx_pending_root: bytes

    @cached_property
    def digest(self) -> bytes:
        return _header_hash(0x12, enc_int(self.epoch), enc_int(self.height),
                            b"".join(lp(h) for h in self.latest_txblock_hashes),
                            self.global_contrib_root, self.tx_confirm_root, self.tx_pending_root)

    def record(self) -> dict:
        return {"type": "system_summary", "epoch": self.epoch, "height": self.height,
                "latest_txblock_hashes": [h.hex() for h in self.latest_txblock_hashes],
                "global_contrib_root": self.global_contrib_root.hex(),
                "tx_confirm_root": self.tx_confirm_root.hex(),
                "tx_pending_root": self.tx_pending_root.hex(), "hash": self.digest.hex()}


@dataclass(frozen=True)
class StateBlock:
    epoch: int
    node_mapping: Mapping[Address, int]
    account_partition: Mapping[Address, int]
    tx_reload: Mapping[int, tuple]
    contributions: Mapping[Address, Contribution] = field(default_factory=dict)

    @cached_property
    def node_info_root(self) -> bytes:
        items = {}
        for node, shard in self.node_mapping.items():
            value = lp(enc_int(shard))
            if node in self.contributions:
                value += contrib_value(self.contributions[node])
            items[node.to_bytes32()] = value
        return AuthenticatedMap.from_items(items).root

    @cached_property
    def account_info_root(self) -> bytes:
        return AuthenticatedMap.from_items(
            {a.to_bytes32(): lp(enc_int(s)) for a, s in self.account_partition.items()}).root

    @cached_property
    def tx_reload_root(self) -> bytes:
        return AuthenticatedMap.from_items(
            {tx_key(t): lp(enc_int(shard)) + tx_value(t)
             for shard, txs in self.tx_reload.items() for t in txs}).root

    @cached_property
    def digest(self) -> bytes:
        return _header_hash(0x13, enc_int(self.epoch), self.node_info_root,
                            self.account_info_root, self.tx_reload_root)

    def record(self) -> dict:
        return {"type": "state", "epoch": self.epoch,
                "node_info_root": self.node_info_root.hex(),
                "account_info_root": self.account_info_root.hex(),
                "tx_reload_root": self.tx_reload_root.hex(),
                "reload_counts": {str(k): len(v) for k, v in sorted(self.tx_reload.items())},
                "hash": self.digest.hex()}


class OrphanAccountError(KeyError):
    pass


def reload_shard(tx: Transaction, partition: Mapping[Address, int]) -> int:
    """Shard a pending tx half moves to: the recipient's for relay halves, else the sender's."""
    account = tx.recipient if tx.kind is TxKind.RELAY_HALF else tx.sender
    try:
        return partition[account]
    except KeyError:
        raise OrphanAccountError(f"orphan account {account!r}") from None


def rebucket(pending_by_old_shard: Mapping[int, Iterable[Transaction]],
             partition: Mapping[Address, int]) -> dict[int, tuple]:
    buckets: dict[int, list[Transaction]] = {}
    for shard in sorted(pending_by_old_shard):
        for tx in pending_by_old_shard[shard]:
            buckets.setdefault(reload_shard(tx, partition), []).append(tx)
    return {k: tuple(v) for k, v in sorted(buckets.items())}


def build_state_block(epoch: int, mapping: Mapping[Address, int],
                      partition: Mapping[Address, int],
                      pending_by_old_shard: Mapping[int, Iterable[Transaction]],
                      contributions: Optional[Mapping[Address, Contribution]] = None
                      ) -> StateBlock:
    return StateBlock(epoch, dict(mapping), dict(partition),
                      rebucket(pending_by_old_shard, partition), dict(contributions or {}))


def build_summary_blocks(epoch: int, K: int, height: int,
                         stage_contributions: Mapping[int, Mapping[Address, Contribution]],
                         pending: Mapping[int, Sequence[Transaction]],
                         latest_txblocks: Mapping[int, bytes],
                         global_contributions: Mapping[Address, Contribution],
                         confirmed: Iterable[Transaction]
                         ) -> tuple[list[ShardSummaryBlock], SystemSummaryBlock]:
    """Per-shard summaries plus the system summary at ``height``.

    ``latest_txblocks`` maps a shard to its newest TX-Block digest; a shard that
    produced no block carries the empty digest.
    """
    missing = [k for k in range(K) if k not in stage_contributions]
    if missing:
        raise ValueError(f"missing shard ledger for shards {missing}")
    shard_blocks = [ShardSummaryBlock(k, epoch, dict(stage_contributions[k]),
                                      tuple(pending.get(k, ()))) for k in range(K)]
    all_pending = [t for k in range(K) for t in pending.get(k, ())]
    system = SystemSummaryBlock(
        epoch, height, tuple(latest_txblocks.get(k, EMPTY_ROOT) for k in range(K)),
        contrib_map(global_contributions).root, tx_map(confirmed).root, tx_map(all_pending).root)
    return shard_blocks, system


def dump_blocks(path: Union[str, Path], blocks: Iterable) -> None:
    with open(path, "w") as fh:
        for b in blocks:
            fh.write(json.dumps(b.record(), sort_keys=True, separators=(",", ":")) + "\n")
