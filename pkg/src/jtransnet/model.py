"""JTransNet: transformer encoder over bundle tokens, sort-based allocation,
sigmoid-scaled payments.

Pipeline for a batch of bid profiles::

    bundle features -> token projection -> D pre-norm attention blocks
    -> per-token score Q -> sort matrix (relaxed or exact) -> first K rows
    -> bidder allocation -> payment fraction per bidder -> payments

No positional information enters anywhere, so permuting brands or stores
permutes the outcome accordingly. The learned weights do not depend on the
instance size; one parameter set can run any (m, n, K, relation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .auction import AuctionConfig, BidProfile, BundleIndex, Outcome, bundle_bids, enumerate_bundles
from .autodiff import Tensor

NUM_TOKEN_FEATURES = 5


@dataclass(frozen=True)
class Architecture:
    depth: int = 2
    width: int = 64
    heads: int = 4
    ff_width: int = 128
    pay_width: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if min(self.depth, self.width, self.heads, self.ff_width, self.pay_width) < 1:
            raise ValueError("architecture sizes must be positive")


def param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    d = arch.width
    shapes = {"embed.w": (NUM_TOKEN_FEATURES, d), "embed.b": (d,)}
    for l in range(arch.depth):
        p = f"block{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "out.w": (d, d), p + "out.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff1.w": (d, arch.ff_width), p + "ff1.b": (arch.ff_width,),
            p + "ff2.w": (arch.ff_width, d), p + "ff2.b": (d,),
        })
    shapes.update({"final_ln.g": (d,), "final_ln.b": (d,), "score.w": (d, 1), "score.b": (1,)})
    for side in ("brand", "store"):
        shapes.update({
            f"pay_{side}.w1": (d + 2, arch.pay_width), f"pay_{side}.b1": (arch.pay_width,),
            f"pay_{side}.w2": (arch.pay_width, 1), f"pay_{side}.b2": (1,),
        })
    return shapes


@dataclass
class ModelParams:
    """Learnable weights plus the hyperparameters needed to use them."""

    arch: Architecture
    weights: dict[str, Tensor]
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def init(cls, arch: Architecture | None = None, seed: int = 0, tau: float = 1.0) -> "ModelParams":
        arch = arch or Architecture()
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in param_shapes(arch).items():
            if name.endswith(".g"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-limit, limit, size=shape)
            weights[name] = ad.tensor(data, requires_grad=True)
        return cls(arch, weights, tau)

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.weights.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            {k: ad.tensor(v.data.copy(), requires_grad=True) for k, v in self.weights.items()},
            self.tau,
        )

    def zero_grad(self) -> None:
        for t in self.weights.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.weights.values())


@dataclass(frozen=True)
class Instance:
    """Constants derived once per auction configuration."""

    config: AuctionConfig
    idx: BundleIndex
    alpha: np.ndarray
    brand_inc_t: np.ndarray = field(repr=False)
    store_inc_t: np.ndarray = field(repr=False)
    brand_pool: np.ndarray = field(repr=False)
    store_pool: np.ndarray = field(repr=False)

    @property
    def C(self) -> int:
        return self.idx.size

    @property
    def K(self) -> int:
        return self.config.num_slots


def _pool(inc: np.ndarray) -> np.ndarray:
    counts = inc.sum(axis=1, keepdims=True)
    return np.divide(inc, counts, out=np.zeros_like(inc), where=counts > 0)


@lru_cache(maxsize=64)
def instance_for(config: AuctionConfig) -> Instance:
    idx = enumerate_bundles(config)
    bi, si = idx.brand_incidence(), idx.store_incidence()
    return Instance(config, idx, config.alpha, bi.T.copy(), si.T.copy(), _pool(bi), _pool(si))


# ---------------------------------------------------------------- stages


def embed(params: ModelParams, inst: Instance, brand_bids: np.ndarray, store_bids: np.ndarray) -> Tensor:
    """Token matrix (B, C, d): projection of (b_i, b_j, e_c, sum(alpha), alpha_1)."""
    e = bundle_bids(brand_bids, store_bids, inst.idx)
    b_i = brand_bids[..., inst.idx.brand_of]
    b_j = store_bids[..., inst.idx.store_of]
    glob = np.broadcast_to(np.array([inst.alpha.sum(), inst.alpha[0]]), e.shape + (2,))
    feats = np.concatenate([b_i[..., None], b_j[..., None], e[..., None], glob], axis=-1)
    w = params.weights
    return ad.add(ad.matmul(ad.constant(feats), w["embed.w"]), w["embed.b"])


def _attention(params: ModelParams, prefix: str, h: Tensor) -> Tensor:
    w = params.weights
    d, H = params.arch.width, params.arch.heads
    dh = d // H
    wqkv, bqkv = w[prefix + "qkv.w"], w[prefix + "qkv.b"]
    heads = []
    for k in range(H):
        parts = []
        for base in (0, d, 2 * d):
            cols = np.arange(base + k * dh, base + (k + 1) * dh)
            parts.append(ad.add(ad.matmul(h, ad.index_select(wqkv, cols, axis=-1)), ad.index_select(bqkv, cols)))
        heads.append(ad.scaled_dot_attention(*parts))
    mixed = heads[0] if H == 1 else ad.concat(heads, axis=-1)
    return ad.add(ad.matmul(mixed, w[prefix + "out.w"]), w[prefix + "out.b"])


def encode(params: ModelParams, tokens: Tensor) -> Tensor:
    w = params.weights
    x = tokens
    for l in range(params.arch.depth):
        p = f"block{l}."
        h = ad.layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])
        x = ad.add(x, _attention(params, p, h))
        h = ad.layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
        h = ad.relu(ad.add(ad.matmul(h, w[p + "ff1.w"]), w[p + "ff1.b"]))
        x = ad.add(x, ad.add(ad.matmul(h, w[p + "ff2.w"]), w[p + "ff2.b"]))
    return ad.layer_norm(x, w["final_ln.g"], w["final_ln.b"])


def score(params: ModelParams, encoded: Tensor) -> Tensor:
    """Bundle scores Q with shape (B, C)."""
    w = params.weights
    q = ad.add(ad.matmul(encoded, w["score.w"]), w["score.b"])
    return ad.reduce_sum(q, axis=-1)


def sort_logits(q: Tensor, num_rows: int | None = None) -> Tensor:
    """Rows k of (C + 1 - 2k) Q - R_Q 1, shape (..., num_rows, C)."""
    q = ad.constant(q) if not isinstance(q, Tensor) else q
    C = q.shape[-1]
    rows = C if num_rows is None else num_rows
    lead = q.shape[:-1]
    col = ad.reshape(q, lead + (C, 1))
    row = ad.reshape(q, lead + (1, C))
    r1 = ad.reduce_sum(ad.absolute(ad.sub(col, row)), axis=-1)
    factors = (C + 1 - 2 * np.arange(1, rows + 1, dtype=np.float64)).reshape(rows, 1)
    return ad.sub(ad.mul(row, factors), ad.reshape(r1, lead + (1, C)))


def descending_order(q: np.ndarray, e: np.ndarray | None = None) -> np.ndarray:
    """Bundle indices by descending score; ties by larger bundle bid, then lower index.

    Works on the last axis; returns 0-based indices (Q~ minus one).
    """
    q = np.asarray(q, dtype=np.float64)
    e = np.zeros_like(q) if e is None else np.broadcast_to(np.asarray(e, dtype=np.float64), q.shape)
    return _descending_order_batch(q, e)


def _descending_order_batch(q: np.ndarray, e: np.ndarray) -> np.ndarray:
    # vectorized path; lexsort sorts by the last key first
    C = q.shape[-1]
    pos = np.broadcast_to(np.arange(C), q.shape)
    keys = np.stack([pos, -e, -q])
    return np.lexsort(keys, axis=-1)


def hard_sort_matrix(q, e=None) -> np.ndarray:
    """C x C 0/1 matrix: entry [k, c] = 1 iff bundle c has the k-th largest score."""
    q = np.asarray(q, dtype=np.float64)
    order = descending_order(q, e)
    C = q.shape[-1]
    out = np.zeros(q.shape[:-1] + (C, C))
    np.put_along_axis(out, order[..., None], 1.0, axis=-1)
    return out


def soft_sort_matrix(q, tau: float, num_rows: int | None = None) -> Tensor:
    """Row k = softmax(((C + 1 - 2k) Q - R_Q 1) / tau)."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return ad.row_softmax(sort_logits(q, num_rows), tau)


def truncate_to_slots(sort_matrix, num_slots: int):
    """Bundle-by-slot allocation S[c, k] = sort_matrix[k, c] for k < K."""
    data = sort_matrix.data if isinstance(sort_matrix, Tensor) else np.asarray(sort_matrix)
    C = data.shape[-1]
    if num_slots > C:
        raise ValueError(f"cannot fill K={num_slots} slots with C={C} bundles")
    return np.swapaxes(data[..., :num_slots, :], -1, -2)


def payment_fractions(
    params: ModelParams, inst: Instance, encoded: Tensor, ctr_brand: Tensor, ctr_store: Tensor,
    brand_bids: np.ndarray, store_bids: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Sigmoid head per bidder over (mean encoding of its bundles, expected CTR, bid)."""
    w = params.weights
    out = []
    for side, pool, ctr, bids in (
        ("brand", inst.brand_pool, ctr_brand, brand_bids),
        ("store", inst.store_pool, ctr_store, store_bids),
    ):
        pooled = ad.matmul(ad.constant(pool), encoded)
        lead = ctr.shape
        feats = ad.concat([pooled, ad.reshape(ctr, lead + (1,)), ad.constant(np.asarray(bids)[..., None])], axis=-1)
        h = ad.relu(ad.add(ad.matmul(feats, w[f"pay_{side}.w1"]), w[f"pay_{side}.b1"]))
        logit = ad.add(ad.matmul(h, w[f"pay_{side}.w2"]), w[f"pay_{side}.b2"])
        out.append(ad.sigmoid(ad.reduce_sum(logit, axis=-1)))
    return out[0], out[1]


def payments(frac: Tensor, ctr: Tensor, bids: np.ndarray) -> Tensor:
    """p = fraction * bid * sum_k a_k alpha_k."""
    return ad.mul(ad.mul(frac, ctr), ad.constant(bids))


# ---------------------------------------------------------------- forward


@dataclass
class Forward:
    """Differentiable pieces of one batched forward pass.

    ``alloc`` is slot-major (B, K, C); ``outcome()`` converts to numpy.
    """

    inst: Instance
    scores: Tensor
    alloc: Tensor
    ctr_brand: Tensor
    ctr_store: Tensor
    pay_brand: Tensor
    pay_store: Tensor
    mode: str

    def revenue(self) -> Tensor:
        return ad.add(ad.reduce_sum(self.pay_brand, axis=-1), ad.reduce_sum(self.pay_store, axis=-1))

    def outcome(self) -> Outcome:
        alloc = np.swapaxes(self.alloc.data, -1, -2)
        return Outcome.from_allocation(
            alloc, self.pay_brand.data, self.pay_store.data, self.inst.idx, self.inst.alpha, self.mode
        )


def forward_batch(
    params: ModelParams, config: AuctionConfig, brand_bids, store_bids,
    mode: str = "soft", tau: float | None = None,
) -> Forward:
    """Run the mechanism on bids of shape (B, m) and (B, n) (or unbatched)."""
    if mode not in ("soft", "hard"):
        raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")
    inst = instance_for(config)
    bb = np.asarray(brand_bids, dtype=np.float64)
    sb = np.asarray(store_bids, dtype=np.float64)
    encoded = encode(params, embed(params, inst, bb, sb))
    q = score(params, encoded)
    if mode == "soft":
        alloc = soft_sort_matrix(q, params.tau if tau is None else tau, num_rows=inst.K)
    else:
        e = bundle_bids(bb, sb, inst.idx)
        order = _descending_order_batch(q.data, e)[..., : inst.K]
        hard = np.zeros(q.shape[:-1] + (inst.K, inst.C))
        np.put_along_axis(hard, order[..., None], 1.0, axis=-1)
        alloc = ad.constant(hard)
    alpha = inst.alpha.reshape(-1, 1)
    ctr_b = ad.reduce_sum(ad.mul(ad.matmul(alloc, ad.constant(inst.brand_inc_t)), alpha), axis=-2)
    ctr_s = ad.reduce_sum(ad.mul(ad.matmul(alloc, ad.constant(inst.store_inc_t)), alpha), axis=-2)
    frac_b, frac_s = payment_fractions(params, inst, encoded, ctr_b, ctr_s, bb, sb)
    return Forward(inst, q, alloc, ctr_b, ctr_s, payments(frac_b, ctr_b, bb), payments(frac_s, ctr_s, sb), mode)


def forward(params: ModelParams, config: AuctionConfig, bids: BidProfile, mode: str = "hard",
            tau: float | None = None) -> Outcome:
    with ad.no_grad():
        return forward_batch(params, config, bids.brand, bids.store, mode, tau).outcome()


class JTransNetMechanism:
    """Hard-mode (deployed) mechanism wrapper with the evaluator interface."""

    name = "JTransNet"

    def __init__(self, params: ModelParams, config: AuctionConfig, mode: str = "hard"):
        self.params = params
        self.config = config
        self.mode = mode

    def with_config(self, config: AuctionConfig) -> "JTransNetMechanism":
        return JTransNetMechanism(self.params, config, self.mode)

    def run(self, brand_bids: np.ndarray, store_bids: np.ndarray, chunk: int = 4096) -> Outcome:
        bb = np.atleast_2d(np.asarray(brand_bids, dtype=np.float64))
        sb = np.atleast_2d(np.asarray(store_bids, dtype=np.float64))
        parts = []
        with ad.no_grad():
            for start in range(0, bb.shape[0], chunk):
                f = forward_batch(self.params, self.config, bb[start:start + chunk], sb[start:start + chunk], self.mode)
                parts.append(f.outcome())
        return concat_outcomes(parts)


def concat_outcomes(parts: list[Outcome]) -> Outcome:
    if len(parts) == 1:
        return parts[0]
    fields = ("alloc", "alloc_brand", "alloc_store", "pay_brand", "pay_store", "ctr_brand", "ctr_store")
    return Outcome(**{f: np.concatenate([getattr(p, f) for p in parts]) for f in fields}, mode=parts[0].mode)
