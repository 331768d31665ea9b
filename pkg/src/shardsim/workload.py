"""Transaction trace loading and deterministic synthetic workloads."""

from __future__ import annotations

import bisect
import csv
import itertools
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Union

from .model import ADDRESS_BITS, Address

log = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.01


class TraceCorrupt(ValueError):
    pass


class TraceRecord(NamedTuple):
    sender: Address
    recipient: Address
    amount: int = 1

    @property
    def self_payment(self) -> bool:
        return self.sender == self.recipient


def parse_address(text: str) -> Address:
    text = text.strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    if not text:
        raise ValueError("empty address")
    value = int(text, 16)
    # Longer inputs keep their low 256 bits.
    return Address(value & ((1 << ADDRESS_BITS) - 1))


def read_trace(path: Union[str, Path], limit: Optional[int] = None) -> tuple[list[TraceRecord], int]:
    """Return (records, malformed_row_count) for a ``from,to[,amount]`` CSV."""
    records: list[TraceRecord] = []
    malformed = 0
    scanned = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        if header[:2] != ["from", "to"]:
            raise TraceCorrupt(f"{path}: header must start with from,to")
        has_amount = len(header) > 2 and header[2] == "amount"
        for row in reader:
            if limit is not None and len(records) >= limit:
                break
            if not row:
                continue
            scanned += 1
            try:
                amount = int(row[2]) if has_amount and len(row) > 2 and row[2].strip() else 1
                if amount < 0:
                    raise ValueError("negative amount")
                records.append(TraceRecord(parse_address(row[0]), parse_address(row[1]), amount))
            except (ValueError, IndexError):
                malformed += 1
    if scanned and malformed / scanned > MALFORMED_LIMIT:
        raise TraceCorrupt(f"trace corrupt: {malformed} of {scanned} rows malformed")
    if malformed:
        log.warning("%s: skipped %d malformed rows", path, malformed)
    return records, malformed


def load_trace(path: Union[str, Path], limit: Optional[int] = None) -> list[TraceRecord]:
    return read_trace(path, limit)[0]


def write_trace(path: Union[str, Path], records: Iterable[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["from", "to", "amount"])
        for r in records:
            out.writerow(["0x" + r.sender.to_hex(), "0x" + r.recipient.to_hex(), r.amount])


# -- synthetic models ---------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    n_accounts: int = 1000


@dataclass(frozen=True)
class Clustered:
    """``k_clusters`` account groups; each tx stays inside its sender's group
    with probability ``intra_prob``, otherwise targets another group."""

    k_clusters: int
    intra_prob: float
    cluster_size: int = 50


@dataclass(frozen=True)
class Hotspot:
    """With probability ``skew`` one endpoint of a tx is a hot account."""

    accounts: int
    skew: float
    n_accounts: int = 1000


@dataclass(frozen=True)
class EthLike:
    """Community structure with Zipf-skewed account activity plus a few
    exchange-like hubs, a stand-in for account-model mainnet traffic."""

    n_accounts: int = 20000
    k_clusters: int = 200
    intra_prob: float = 0.85
    zipf_s: float = 1.1
    hubs: int = 8
    hub_prob: float = 0.1


TraceModel = Union[Uniform, Clustered, Hotspot, EthLike]


def _accounts(rng: random.Random, n: int) -> list[Address]:
    # 160-bit values, the shape of account-model addresses.
    seen: set[int] = set()
    out = []
    while len(out) < n:
        v = rng.getrandbits(160)
        if v not in seen:
            seen.add(v)
            out.append(Address(v))
    return out


def synth_clusters(model: Clustered, seed: int) -> list[list[Address]]:
    """Ground-truth account groups used by ``synth_trace`` for a clustered model."""
    rng = random.Random(f"clusters/{seed}")
    flat = _accounts(rng, model.k_clusters * model.cluster_size)
    size = model.cluster_size
    return [flat[i * size:(i + 1) * size] for i in range(model.k_clusters)]


def _zipf_cdf(n: int, s: float) -> list[float]:
    return list(itertools.accumulate(1.0 / (i + 1) ** s for i in range(n)))


def synth_trace(model: TraceModel, n_tx: int, seed: int) -> list[TraceRecord]:
    if n_tx <= 0:
        raise ValueError("n_tx must be positive")
    rng = random.Random(f"trace/{seed}")
    out: list[TraceRecord] = []
    if isinstance(model, Uniform):
        accts = _accounts(rng, model.n_accounts)
        for _ in range(n_tx):
            a, b = rng.sample(accts, 2)
            out.append(TraceRecord(a, b))
    elif isinstance(model, Clustered):
        clusters = synth_clusters(model, seed)
        for _ in range(n_tx):
            c = rng.randrange(model.k_clusters)
            a = rng.choice(clusters[c])
            if model.k_clusters == 1 or rng.random() < model.intra_prob:
                b = rng.choice(clusters[c])
                while b == a and model.cluster_size > 1:
                    b = rng.choice(clusters[c])
            else:
                other = rng.randrange(model.k_clusters - 1)
                b = rng.choice(clusters[other + (other >= c)])
            out.append(TraceRecord(a, b))
    elif isinstance(model, Hotspot):
        accts = _accounts(rng, model.accounts + model.n_accounts)
        hot, cold = accts[:model.accounts], accts[model.accounts:]
        for _ in range(n_tx):
            if rng.random() < model.skew:
                h, c = rng.choice(hot), rng.choice(cold)
                out.append(TraceRecord(h, c) if rng.random() < 0.5 else TraceRecord(c, h))
            else:
                a, b = rng.sample(cold, 2)
                out.append(TraceRecord(a, b))
    elif isinstance(model, EthLike):
        accts = _accounts(rng, model.n_accounts + model.hubs)
        hubs, pool = accts[:model.hubs], accts[model.hubs:]
        size = len(pool) // model.k_clusters
        clusters = [pool[i * size:(i + 1) * size] for i in range(model.k_clusters)]
        cluster_cdf = _zipf_cdf(model.k_clusters, model.zipf_s)
        member_cdf = _zipf_cdf(size, model.zipf_s)

        def pick(cdf: list[float]) -> int:
            return bisect.bisect_left(cdf, rng.random() * cdf[-1])

        for _ in range(n_tx):
            c = pick(cluster_cdf)
            a = clusters[c][pick(member_cdf)]
            r = rng.random()
            if r < model.hub_prob:
                b = rng.choice(hubs)
            elif r < model.hub_prob + (1 - model.hub_prob) * model.intra_prob:
                b = clusters[c][pick(member_cdf)]
            else:
                b = clusters[pick(cluster_cdf)][pick(member_cdf)]
            out.append(TraceRecord(a, b) if rng.random() < 0.5 else TraceRecord(b, a))
    else:
        raise TypeError(f"unknown trace model {model!r}")
    return out
