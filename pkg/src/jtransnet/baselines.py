"""VCG for joint auctions with Clarke-pivot payments per brand and per store.

The allocation gives the K slots to K distinct bundles maximizing
sum_k alpha_k * e_{c_k}. Removing a bidder removes every bundle containing
it; if fewer than K bundles remain, the trailing slots stay empty.

Payments are the plain pivot without clamping at zero. On graphs where a
bidder's removal also strips its partners of bundles the pivot can be
negative (a subsidy); clamping it would break truthfulness there. With the
full brand-store relation the pivot is never negative.

Three exact allocation routes are available: exhaustive enumeration of
injective slot assignments, an optimal assignment solver, and a sort (with
alpha non-increasing and e >= 0 the top-K bundles in descending order are
optimal by the rearrangement inequality). The batched mechanism uses the
sort; tests cross-check all three.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .auction import AuctionConfig, BidProfile, BundleIndex, InstanceError, Outcome, bundle_bids, enumerate_bundles

EXHAUSTIVE_LIMIT = 10**6
_TIE = 1e-12


def _falling(c: int, k: int) -> int:
    return math.perm(c, k) if c >= k else math.perm(c, c)


def _assignment_key(e: np.ndarray, slots: tuple[int, ...]):
    # larger bundle bid first, then lower canonical index, slot by slot
    return tuple(x for c in slots for x in ((e[c], -c) if c >= 0 else (-np.inf, -np.inf)))


def exhaustive_assignment(e: np.ndarray, alpha: np.ndarray, available: np.ndarray | None = None) -> tuple[int, ...]:
    """Best slot -> bundle map by enumeration; -1 marks an empty slot."""
    e = np.asarray(e, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    K = alpha.size
    cands = np.flatnonzero(np.ones(e.size, bool) if available is None else available)
    fill = min(K, cands.size)
    if _falling(cands.size, fill) > EXHAUSTIVE_LIMIT:
        raise InstanceError(f"exhaustive enumeration over {cands.size} bundles and {K} slots is too large")
    perms = [tuple(p) + (-1,) * (K - fill) for p in itertools.permutations(cands.tolist(), fill)]
    welfare = [_welfare(p, e, alpha) for p in perms]
    top = max(welfare)
    ties = [p for p, w in zip(perms, welfare) if w >= top - _TIE]
    return max(ties, key=lambda p: _assignment_key(e, p))


def solver_assignment(e: np.ndarray, alpha: np.ndarray, available: np.ndarray | None = None) -> tuple[int, ...]:
    """Best slot -> bundle map via the optimal assignment solver on the K x C weights."""
    e = np.asarray(e, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    K = alpha.size
    cands = np.flatnonzero(np.ones(e.size, bool) if available is None else available)
    if cands.size == 0:
        return (-1,) * K
    weights = np.outer(alpha, e[cands])
    rows, cols = linear_sum_assignment(weights, maximize=True)
    # the solver returns some optimal set; among bundles with equal bids keep the lowest indices
    picked = cands[cols]
    chosen = []
    for value in np.unique(e[picked]):
        same = cands[e[cands] == value]
        chosen.extend(same[: int((e[picked] == value).sum())].tolist())
    chosen.sort(key=lambda c: (-e[c], c))
    return tuple(chosen) + (-1,) * (K - len(chosen))


def sorted_assignment(e: np.ndarray, alpha: np.ndarray, available: np.ndarray | None = None) -> tuple[int, ...]:
    e = np.asarray(e, dtype=np.float64)
    K = len(alpha)
    cands = np.flatnonzero(np.ones(e.size, bool) if available is None else available)
    chosen = sorted(cands.tolist(), key=lambda c: (-e[c], c))[:K]
    return tuple(chosen) + (-1,) * (K - len(chosen))


_METHODS = {"exhaustive": exhaustive_assignment, "assignment": solver_assignment, "sort": sorted_assignment}


def _pick(method: str, C: int, K: int):
    if method == "auto":
        method = "exhaustive" if _falling(C, K) <= EXHAUSTIVE_LIMIT else "assignment"
    try:
        return _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown allocation method {method!r}") from None


def slots_to_matrix(slots: tuple[int, ...], C: int) -> np.ndarray:
    s = np.zeros((C, len(slots)))
    for k, c in enumerate(slots):
        if c >= 0:
            s[c, k] = 1.0
    return s


def vcg_allocate(config: AuctionConfig, bids: BidProfile, method: str = "auto") -> np.ndarray:
    """Welfare-maximizing hard bundle-by-slot allocation (C x K)."""
    idx = enumerate_bundles(config)
    e = bundle_bids(bids.brand, bids.store, idx)
    slots = _pick(method, idx.size, config.num_slots)(e, config.alpha)
    return slots_to_matrix(slots, idx.size)


def _welfare(slots, e, alpha) -> float:
    return float(sum(alpha[k] * e[c] for k, c in enumerate(slots) if c >= 0))


@dataclass
class VcgOutcome:
    alloc: np.ndarray
    welfare: float
    pay_brand: np.ndarray
    pay_store: np.ndarray


def vcg(config: AuctionConfig, bids: BidProfile, method: str = "auto") -> VcgOutcome:
    """Allocation, reported welfare and Clarke-pivot payments for one profile."""
    idx = enumerate_bundles(config)
    alpha = config.alpha
    e = bundle_bids(bids.brand, bids.store, idx)
    solve = _pick(method, idx.size, config.num_slots)
    slots = solve(e, alpha)
    total = _welfare(slots, e, alpha)
    alloc = slots_to_matrix(slots, idx.size)
    g_brand = idx.brand_incidence() @ alloc @ alpha
    g_store = idx.store_incidence() @ alloc @ alpha

    def pivot(members: np.ndarray, own: float) -> float:
        absent = solve(e, alpha, available=~members)
        return _welfare(absent, e, alpha) - (total - own)

    brand_of, store_of = idx.brand_of, idx.store_of
    pay_b = np.array([pivot(brand_of == i, bids.brand[i] * g_brand[i]) for i in range(config.num_brands)])
    pay_s = np.array([pivot(store_of == j, bids.store[j] * g_store[j]) for j in range(config.num_stores)])
    return VcgOutcome(alloc, total, pay_b, pay_s)


def vcg_payments(config: AuctionConfig, bids: BidProfile, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    out = vcg(config, bids, method)
    return out.pay_brand, out.pay_store


# ------------------------------------------------------------------ batched


def _topk_welfare(e: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """sum_k alpha_k * (k-th largest e), masked entries (-inf) counting as empty."""
    K = alpha.size
    top = -np.sort(-e, axis=-1)[..., :K]
    if top.shape[-1] < K:
        top = np.concatenate([top, np.full(top.shape[:-1] + (K - top.shape[-1],), -np.inf)], axis=-1)
    return np.where(np.isfinite(top), top, 0.0) @ alpha


class VcgMechanism:
    """Batched VCG with the evaluator's mechanism interface."""

    name = "VCG"

    def __init__(self, config: AuctionConfig):
        self.config = config
        self.idx: BundleIndex = enumerate_bundles(config)

    def with_config(self, config: AuctionConfig) -> "VcgMechanism":
        return VcgMechanism(config)

    def run(self, brand_bids, store_bids) -> Outcome:
        bb = np.atleast_2d(np.asarray(brand_bids, dtype=np.float64))
        sb = np.atleast_2d(np.asarray(store_bids, dtype=np.float64))
        idx, alpha = self.idx, self.config.alpha
        K, C = alpha.size, idx.size
        e = bundle_bids(bb, sb, idx)
        # stable sort on -e keeps lower canonical index first among equal bids
        order = np.argsort(-e, axis=-1, kind="stable")[:, :K]
        alloc = np.zeros(e.shape + (K,))
        rows = np.arange(e.shape[0])[:, None]
        alloc[rows, order, np.arange(K)[None, :]] = 1.0
        out = Outcome.from_allocation(alloc, np.zeros_like(bb), np.zeros_like(sb), idx, alpha)
        total = (np.take_along_axis(e, order, axis=-1) * alpha).sum(axis=-1)

        for side, members_of, bids, ctr, pay in (
            ("brand", idx.brand_of, bb, out.ctr_brand, out.pay_brand),
            ("store", idx.store_of, sb, out.ctr_store, out.pay_store),
        ):
            for x in range(bids.shape[1]):
                masked = np.where(members_of == x, -np.inf, e)
                absent = _topk_welfare(masked, alpha)
                pay[:, x] = absent - (total - bids[:, x] * ctr[:, x])
        return out
