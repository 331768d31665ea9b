"""Domain types shared across the simulator."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

ADDRESS_BITS = 256
_ADDRESS_LIMIT = 1 << ADDRESS_BITS

# ShardRef is a plain int: 0..K-1 for W-Shards, A_SHARD for the administrative shard.
A_SHARD = -1


class Address(int):
    """256-bit account / node identifier.

    Subclasses ``int`` so ordering, hashing and arithmetic are numeric; the
    canonical text form is 64 lowercase hex digits.
    """

    __slots__ = ()

    def __new__(cls, value: int | str = 0) -> "Address":
        if isinstance(value, str):
            return cls.from_hex(value)
        value = int(value)
        if not 0 <= value < _ADDRESS_LIMIT:
            raise ValueError(f"address out of range: {value}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "Address":
        text = text.strip().lower()
        if text.startswith("0x"):
            text = text[2:]
        if not text or len(text) > 64:
            raise ValueError(f"bad address hex: {text!r}")
        return cls(int(text, 16))

    def to_hex(self) -> str:
        return format(int(self), "064x")

    def to_bytes32(self) -> bytes:
        return int(self).to_bytes(32, "big")

    def __repr__(self) -> str:
        return f"Address(0x{self.to_hex()})"

    __str__ = to_hex


def is_w_shard(ref: int, K: int) -> bool:
    return 0 <= ref < K


def check_shard_ref(ref: int, K: int) -> int:
    if ref != A_SHARD and not 0 <= ref < K:
        raise ValueError(f"shard ref {ref} outside 0..{K - 1}")
    return ref


@dataclass(frozen=True)
class BehaviorProfile:
    malicious_count_position: int = 0
    malicious_prob: float = 0.0
    delay_ms: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.malicious_prob <= 1.0:
            raise ValueError("malicious_prob must lie in [0, 1]")
        if self.delay_ms < 0:
            raise ValueError("delay_ms must be nonnegative")


@dataclass
class Node:
    id: Address
    shard: int
    s: float
    p: float
    behavior: BehaviorProfile = field(default_factory=BehaviorProfile)


@dataclass
class Account:
    address: Address
    balance: int
    shard: int

    def debit(self, amount: int) -> None:
        if amount > self.balance:
            raise ValueError(f"overdraft on {self.address!r}")
        self.balance -= amount

    def credit(self, amount: int) -> None:
        self.balance += amount


class TxKind(str, enum.Enum):
    INTRA = "intra"
    CROSS_ORIGIN = "cross_origin"
    RELAY_HALF = "relay_half"


@dataclass
class Transaction:
    """A transfer. ``seq`` is the trace position and identifies the tx across halves."""

    seq: int
    sender: Address
    recipient: Address
    amount: int
    inject_time: int
    commit_time: Optional[int] = None
    kind: TxKind = TxKind.INTRA

    def __post_init__(self) -> None:
        if self.amount < 0:
            raise ValueError("negative amount")

    def relay_half(self) -> "Transaction":
        return Transaction(self.seq, self.sender, self.recipient, self.amount,
                           self.inject_time, None, TxKind.RELAY_HALF)

    def encode(self) -> bytes:
        """Canonical byte form used for digests (kind excluded: both halves share an id)."""
        return (self.seq.to_bytes(8, "big") + self.sender.to_bytes32()
                + self.recipient.to_bytes32() + self.amount.to_bytes(16, "big")
                + self.inject_time.to_bytes(8, "big"))
