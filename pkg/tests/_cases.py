"""Shared builders for gradient checks and small auction instances."""

from __future__ import annotations

import numpy as np

from jtransnet import autodiff as ad


def _var(rng, shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return ad.tensor(x, requires_grad=True)


def _probe(out, rng):
    """Scalar sum(out * w) with a fixed random w so every output entry matters."""
    w = rng.standard_normal(out.shape)
    return ad.reduce_sum(ad.mul(out, w))


def _fixed_probe(fn, params, rng):
    seed = int(rng.integers(1 << 30))

    def f():
        return _probe(fn(*params), np.random.default_rng(seed))

    return f, params


def _case_add(rng):
    return _fixed_probe(ad.add, [_var(rng, (3, 4)), _var(rng, (4,))], rng)


def _case_sub(rng):
    return _fixed_probe(ad.sub, [_var(rng, (2, 3, 4)), _var(rng, (3, 1))], rng)


def _case_mul(rng):
    return _fixed_probe(ad.mul, [_var(rng, (3, 4)), _var(rng, (3, 4))], rng)


def _case_neg(rng):
    return _fixed_probe(ad.neg, [_var(rng, (5,))], rng)


def _case_scale(rng):
    c = float(rng.uniform(-3, 3))
    return _fixed_probe(lambda a: ad.scale(a, c), [_var(rng, (3, 2))], rng)


def _case_matmul(rng):
    return _fixed_probe(ad.matmul, [_var(rng, (2, 3, 4)), _var(rng, (4, 5))], rng)


def _case_broadcast(rng):
    return _fixed_probe(lambda a: ad.broadcast(a, (2, 3, 4)), [_var(rng, (3, 1))], rng)


def _case_reshape(rng):
    return _fixed_probe(lambda a: ad.reshape(a, (4, 3)), [_var(rng, (2, 6))], rng)


def _case_reduce_sum(rng):
    return _fixed_probe(lambda a: ad.reduce_sum(a, axis=1, keepdims=True), [_var(rng, (3, 4))], rng)


def _case_mean(rng):
    return _fixed_probe(lambda a: ad.mean(a, axis=0), [_var(rng, (3, 4))], rng)


def _case_abs(rng):
    return _fixed_probe(ad.absolute, [_var(rng, (3, 4), away_from_zero=True)], rng)


def _case_relu(rng):
    return _fixed_probe(ad.relu, [_var(rng, (3, 4), away_from_zero=True)], rng)


def _case_sigmoid(rng):
    return _fixed_probe(ad.sigmoid, [_var(rng, (3, 4))], rng)


def _case_softmax(rng):
    tau = float(rng.uniform(0.3, 2.0))
    return _fixed_probe(lambda a: ad.row_softmax(a, tau), [_var(rng, (3, 5))], rng)


def _case_layer_norm(rng):
    return _fixed_probe(ad.layer_norm, [_var(rng, (3, 6)), _var(rng, (6,)), _var(rng, (6,))], rng)


def _case_attention(rng):
    return _fixed_probe(ad.scaled_dot_attention, [_var(rng, (2, 4, 3)), _var(rng, (2, 5, 3)), _var(rng, (2, 5, 2))], rng)


def _case_concat(rng):
    return _fixed_probe(lambda a, b: ad.concat([a, b], axis=0), [_var(rng, (2, 3)), _var(rng, (4, 3))], rng)


def _case_index_select(rng):
    idx = rng.integers(0, 4, size=6)
    return _fixed_probe(lambda a: ad.index_select(a, idx, axis=1), [_var(rng, (3, 4))], rng)


PRIMITIVE_CASES = {
    "add": _case_add, "sub": _case_sub, "mul": _case_mul, "neg": _case_neg, "scale": _case_scale,
    "matmul": _case_matmul, "broadcast": _case_broadcast, "reshape": _case_reshape,
    "reduce_sum": _case_reduce_sum, "mean": _case_mean, "absolute": _case_abs, "relu": _case_relu,
    "sigmoid": _case_sigmoid, "row_softmax": _case_softmax, "layer_norm": _case_layer_norm,
    "scaled_dot_attention": _case_attention, "concat": _case_concat, "index_select": _case_index_select,
}


def primitive_max_error(name: str, trials: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        f, params = PRIMITIVE_CASES[name](rng)
        worst = max(worst, ad.finite_diff_check(f, params, step=1e-6))
    return worst


SMALL_ARCH = dict(depth=1, width=8, heads=2, ff_width=8, pay_width=6)


def lagrangian_gradient_error(seed: int = 0, num_coords: int | None = 150, tau: float = 0.7) -> float:
    """Finite-difference check of the full relaxed loss on a 2x2 full instance (C=4, K=2)."""
    from jtransnet.auction import AuctionConfig
    from jtransnet.model import Architecture, ModelParams
    from jtransnet.trainer import SoftMechanism, best_misreports, default_grid, lagrangian_loss

    config = AuctionConfig.full(2, 2, [0.6, 0.2])
    params = ModelParams.init(Architecture(**SMALL_ARCH), seed=seed, tau=tau)
    rng = np.random.default_rng(seed)
    brand, store = rng.uniform(size=(6, 2)), rng.uniform(size=(6, 2))
    table = best_misreports(SoftMechanism(params, config, tau), brand, store, default_grid())
    lam = rng.uniform(0.5, 2.0, size=4)

    def f():
        return lagrangian_loss(params, config, brand, store, table, lam, 3.0, tau).loss

    return ad.finite_diff_check(f, params.tensors(), step=1e-6, num_coords=num_coords,
                                rng=np.random.default_rng(seed + 1))
