"""Joint ad auction domain model: instances, bundles, bids, allocations.

A bundle is a (brand, store) pair allowed by the relation matrix. Bundles
are listed in row-major order over the relation matrix; that order is the
canonical bundle index used everywhere else.

Batched helpers accept a leading sample axis: bids of shape ``(B, m)`` /
``(B, n)`` and bundle allocations of shape ``(B, C, K)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TOL = 1e-9


class InstanceError(ValueError):
    """The auction instance violates a structural assumption."""


@dataclass(frozen=True)
class AuctionConfig:
    num_brands: int
    num_stores: int
    ctrs: tuple[float, ...]
    relation: np.ndarray = field(repr=False)

    def __post_init__(self):
        rel = np.asarray(self.relation, dtype=np.int64)
        object.__setattr__(self, "relation", rel)
        object.__setattr__(self, "ctrs", tuple(float(a) for a in self.ctrs))
        if self.num_brands < 1 or self.num_stores < 1 or len(self.ctrs) < 1:
            raise InstanceError("need at least one brand, one store and one slot")
        if rel.shape != (self.num_brands, self.num_stores):
            raise InstanceError(
                f"relation shape {rel.shape} does not match ({self.num_brands}, {self.num_stores})"
            )
        if not np.isin(rel, (0, 1)).all():
            raise InstanceError("relation matrix must be binary")
        a = np.asarray(self.ctrs)
        if not (a[0] < 1 and a[-1] > 0 and np.all(np.diff(a) <= 0)):
            raise InstanceError(f"CTRs must satisfy 1 > a_1 >= ... >= a_K > 0, got {self.ctrs}")

    @classmethod
    def full(cls, num_brands: int, num_stores: int, ctrs: Sequence[float]) -> "AuctionConfig":
        return cls(num_brands, num_stores, tuple(ctrs), np.ones((num_brands, num_stores), dtype=np.int64))

    @property
    def num_slots(self) -> int:
        return len(self.ctrs)

    @property
    def num_bundles(self) -> int:
        return int(self.relation.sum())

    @property
    def alpha(self) -> np.ndarray:
        return np.asarray(self.ctrs, dtype=np.float64)

    def permuted(self, brand_perm: Sequence[int], store_perm: Sequence[int]) -> "AuctionConfig":
        """Relabel bidders: new brand ``i`` is old brand ``brand_perm[i]``."""
        rel = self.relation[np.asarray(brand_perm)][:, np.asarray(store_perm)]
        return AuctionConfig(self.num_brands, self.num_stores, self.ctrs, rel)

    def to_dict(self) -> dict:
        return {
            "num_brands": self.num_brands,
            "num_stores": self.num_stores,
            "ctrs": list(self.ctrs),
            "relation": self.relation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuctionConfig":
        return cls(int(d["num_brands"]), int(d["num_stores"]), tuple(d["ctrs"]), np.asarray(d["relation"]))

    def __eq__(self, other):
        if not isinstance(other, AuctionConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash((self.num_brands, self.num_stores, self.ctrs, self.relation.tobytes()))


@dataclass(frozen=True)
class BundleIndex:
    bundles: tuple[tuple[int, int], ...]
    num_brands: int
    num_stores: int

    @property
    def size(self) -> int:
        return len(self.bundles)

    @property
    def brand_of(self) -> np.ndarray:
        return np.array([b for b, _ in self.bundles], dtype=np.intp)

    @property
    def store_of(self) -> np.ndarray:
        return np.array([s for _, s in self.bundles], dtype=np.intp)

    def by_brand(self, i: int) -> list[int]:
        return [c for c, (b, _) in enumerate(self.bundles) if b == i]

    def by_store(self, j: int) -> list[int]:
        return [c for c, (_, s) in enumerate(self.bundles) if s == j]

    def brand_incidence(self) -> np.ndarray:
        """(m, C) 0/1 matrix, row i marks the bundles containing brand i."""
        inc = np.zeros((self.num_brands, self.size))
        inc[self.brand_of, np.arange(self.size)] = 1.0
        return inc

    def store_incidence(self) -> np.ndarray:
        inc = np.zeros((self.num_stores, self.size))
        inc[self.store_of, np.arange(self.size)] = 1.0
        return inc


def enumerate_bundles(config: AuctionConfig, require_excess: bool = True) -> BundleIndex:
    """List the allowed (brand, store) pairs in row-major order (0-based ids).

    Raises InstanceError when there are no more bundles than slots, unless
    ``require_excess`` is False (used for pivot sub-instances).
    """
    rows, cols = np.nonzero(config.relation)
    bundles = tuple((int(i), int(j)) for i, j in zip(rows, cols))
    if require_excess and len(bundles) <= config.num_slots:
        raise InstanceError(
            f"instance has C={len(bundles)} bundles but K={config.num_slots} slots; need C > K"
        )
    return BundleIndex(bundles, config.num_brands, config.num_stores)


@dataclass(frozen=True)
class BidProfile:
    """Per-click bids (or values) of every brand and store."""

    brand: np.ndarray
    store: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.brand, dtype=np.float64)
        s = np.asarray(self.store, dtype=np.float64)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
            raise ValueError("bids must be finite")
        if (b < 0).any() or (s < 0).any():
            raise ValueError("bids must be non-negative")
        object.__setattr__(self, "brand", b)
        object.__setattr__(self, "store", s)

    @property
    def batched(self) -> bool:
        return self.brand.ndim == 2

    def __len__(self):
        return self.brand.shape[0] if self.batched else 1


def bundle_bids(brand_bids: np.ndarray, store_bids: np.ndarray, idx: BundleIndex) -> np.ndarray:
    """e_c = b_i + b_j for bundle c = (i, j); works on (..., m) / (..., n)."""
    brand_bids = np.asarray(brand_bids, dtype=np.float64)
    store_bids = np.asarray(store_bids, dtype=np.float64)
    if brand_bids.shape[-1] != idx.num_brands or store_bids.shape[-1] != idx.num_stores:
        raise ValueError(
            f"bid shapes {brand_bids.shape}, {store_bids.shape} do not match "
            f"{idx.num_brands} brands / {idx.num_stores} stores"
        )
    return brand_bids[..., idx.brand_of] + store_bids[..., idx.store_of]


def bidder_alloc(s: np.ndarray, idx: BundleIndex) -> tuple[np.ndarray, np.ndarray]:
    """Sum bundle allocations (..., C, K) into brand (..., m, K) and store (..., n, K)."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-2] != idx.size:
        raise ValueError(f"allocation has {s.shape[-2]} rows, expected C={idx.size}")
    return idx.brand_incidence() @ s, idx.store_incidence() @ s


def is_hard_allocation(s: np.ndarray, tol: float = TOL) -> bool:
    s = np.asarray(s)
    binary = np.all((np.abs(s) <= tol) | (np.abs(s - 1) <= tol))
    cols = np.all(np.abs(s.sum(axis=-2) - 1) <= tol)
    rows = np.all(s.sum(axis=-1) <= 1 + tol)
    return bool(binary and cols and rows)


@dataclass
class Outcome:
    """Result of running a mechanism on one profile or a batch of profiles.

    Arrays carry an optional leading batch axis. ``alloc`` is bundle-by-slot.
    """

    alloc: np.ndarray
    alloc_brand: np.ndarray
    alloc_store: np.ndarray
    pay_brand: np.ndarray
    pay_store: np.ndarray
    ctr_brand: np.ndarray
    ctr_store: np.ndarray
    mode: str = "hard"

    @classmethod
    def from_allocation(cls, alloc, pay_brand, pay_store, idx: BundleIndex, alpha, mode="hard") -> "Outcome":
        a_b, a_s = bidder_alloc(alloc, idx)
        alpha = np.asarray(alpha, dtype=np.float64)
        return cls(
            alloc=np.asarray(alloc, dtype=np.float64),
            alloc_brand=a_b,
            alloc_store=a_s,
            pay_brand=np.asarray(pay_brand, dtype=np.float64),
            pay_store=np.asarray(pay_store, dtype=np.float64),
            ctr_brand=a_b @ alpha,
            ctr_store=a_s @ alpha,
            mode=mode,
        )

    def utilities(self, values: BidProfile) -> tuple[np.ndarray, np.ndarray]:
        """u = v * g - p per brand and per store."""
        return (
            values.brand * self.ctr_brand - self.pay_brand,
            values.store * self.ctr_store - self.pay_store,
        )

    def revenue(self) -> np.ndarray:
        return self.pay_brand.sum(axis=-1) + self.pay_store.sum(axis=-1)

    def welfare(self, values: BidProfile) -> np.ndarray:
        return (values.brand * self.ctr_brand).sum(axis=-1) + (values.store * self.ctr_store).sum(axis=-1)


def outcome_metrics(values: BidProfile, out: Outcome) -> tuple[float, float]:
    """(revenue, welfare) of an outcome; averaged over samples when batched."""
    return float(np.mean(out.revenue())), float(np.mean(out.welfare(values)))
