"""Augmented-Lagrangian training with grid-enumerated misreports.

Each iteration:

1. for every sample in the minibatch and every bidder, try each coefficient
   r in the grid as a misreport r * v (others truthful) and keep the one that
   maximizes the bidder's true-value utility under the relaxed mechanism;
2. evaluate revenue and per-bidder empirical regret with gradients;
3. minimize  -revenue + sum(lambda * rgt) + rho / 2 * sum(rgt ** 2)  by one
   Adam step;
4. every ``lambda_period`` iterations, lambda += rho * rgt at the new weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .auction import AuctionConfig, Outcome
from .autodiff import Tensor
from .model import ModelParams, forward_batch

log = logging.getLogger(__name__)


def default_grid() -> tuple[float, ...]:
    """Misreport coefficients {0, 0.05, ..., 1.45}."""
    return tuple(round(0.05 * k, 2) for k in range(30))


class TrainingError(RuntimeError):
    pass


class Mechanism(Protocol):
    config: AuctionConfig

    def run(self, brand_bids: np.ndarray, store_bids: np.ndarray) -> Outcome: ...


@dataclass
class TrainConfig:
    batch_size: int = 128
    iterations: int = 20000
    learning_rate: float = 1e-3
    rho_init: float = 1.0
    rho_growth: float = 2.0
    rho_period: int = 2000
    rho_max: float = 64.0
    lambda_period: int = 100
    lambda_init: float = 1.0
    misreport_grid: tuple[float, ...] = field(default_factory=default_grid)
    tau: float = 1.0
    tau_final: float | None = None
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.misreport_grid = tuple(float(r) for r in self.misreport_grid)
        if self.batch_size < 1 or self.iterations < 0 or self.lambda_period < 1:
            raise ValueError("batch_size and lambda_period must be >= 1, iterations >= 0")
        if not self.learning_rate > 0 or not self.rho_init > 0 or not self.tau > 0:
            raise ValueError("learning rate, rho and tau must be positive")
        if not self.misreport_grid or 1.0 not in self.misreport_grid:
            raise ValueError("misreport grid must be non-empty and contain 1.0")
        if min(self.misreport_grid) < 0:
            raise ValueError("misreport coefficients must be non-negative")

    def rho_at(self, t: int) -> float:
        return min(self.rho_init * self.rho_growth ** (t // self.rho_period), self.rho_max)

    def tau_at(self, t: int) -> float:
        if self.tau_final is None or self.iterations <= 1:
            return self.tau
        frac = min(t / (self.iterations - 1), 1.0)
        return self.tau * (self.tau_final / self.tau) ** frac

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["misreport_grid"] = list(self.misreport_grid)
        return d


# ------------------------------------------------------------------ misreports


def misreport_profile(brand: np.ndarray, store: np.ndarray, bidder: tuple[str, int], r: float):
    """Copy of the profile with one bidder's entry scaled by ``r``.

    ``bidder`` is ("brand", i) or ("store", j). Bundle bids are derived from
    the profile downstream, so every bundle containing the bidder moves too.
    """
    if r < 0:
        raise ValueError("misreport coefficient must be non-negative")
    brand = np.array(brand, dtype=np.float64)
    store = np.array(store, dtype=np.float64)
    side, k = bidder
    target = brand if side == "brand" else store
    target[..., k] *= r
    return brand, store


def bidders(config: AuctionConfig) -> list[tuple[str, int]]:
    return [("brand", i) for i in range(config.num_brands)] + [("store", j) for j in range(config.num_stores)]


@dataclass
class MisreportTable:
    """Best coefficient per sample and bidder, with the utility it achieves.

    Arrays are (Y, m) for brands and (Y, n) for stores.
    """

    coef_brand: np.ndarray
    coef_store: np.ndarray
    gain_brand: np.ndarray
    gain_store: np.ndarray

    def coef(self, bidder: tuple[str, int]) -> np.ndarray:
        side, k = bidder
        return (self.coef_brand if side == "brand" else self.coef_store)[:, k]

    def regrets(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bidder mean over samples of max(0, gain)."""
        return np.maximum(self.gain_brand, 0).mean(axis=0), np.maximum(self.gain_store, 0).mean(axis=0)


def _utility(out: Outcome, side: str, k: int, true_value: np.ndarray) -> np.ndarray:
    if side == "brand":
        return true_value * out.ctr_brand[..., k] - out.pay_brand[..., k]
    return true_value * out.ctr_store[..., k] - out.pay_store[..., k]


def best_misreports(mechanism: Mechanism, brand: np.ndarray, store: np.ndarray, grid: Sequence[float]) -> MisreportTable:
    """Enumerate r * v over ``grid`` for every sample and bidder.

    The truthful report (r = 1) is the incumbent; a coefficient replaces it
    only on a strictly larger utility, scanning the grid in order.
    """
    brand = np.atleast_2d(np.asarray(brand, dtype=np.float64))
    store = np.atleast_2d(np.asarray(store, dtype=np.float64))
    Y = brand.shape[0]
    grid = np.asarray(grid, dtype=np.float64)
    G = grid.size
    one = np.flatnonzero(grid == 1.0)
    truthful = None if one.size else mechanism.run(brand, store)
    coef = {"brand": np.ones(brand.shape), "store": np.ones(store.shape)}
    gain = {"brand": np.zeros(brand.shape), "store": np.zeros(store.shape)}
    for side, k in bidders(mechanism.config):
        values = (brand if side == "brand" else store)[:, k]
        rep_b = np.tile(brand, (G, 1))
        rep_s = np.tile(store, (G, 1))
        target = rep_b if side == "brand" else rep_s
        target[:, k] *= np.repeat(grid, Y)
        out = mechanism.run(rep_b, rep_s)
        u = _utility(out, side, k, np.tile(values, G)).reshape(G, Y)
        u_true = u[one[0]] if one.size else _utility(truthful, side, k, values)
        first_best = np.argmax(u, axis=0)
        best = u[first_best, np.arange(Y)]
        improves = best > u_true
        coef[side][:, k] = np.where(improves, grid[first_best], 1.0)
        gain[side][:, k] = np.where(improves, best - u_true, 0.0)
    return MisreportTable(coef["brand"], coef["store"], gain["brand"], gain["store"])


def empirical_regret(table: MisreportTable) -> tuple[np.ndarray, np.ndarray]:
    return table.regrets()


# ------------------------------------------------------------------ loss


@dataclass
class LossTerms:
    loss: Tensor
    revenue: Tensor
    regret: Tensor  # (m + n,), brands first

    @property
    def regret_values(self) -> np.ndarray:
        return self.regret.data


def regret_terms(
    params: ModelParams, config: AuctionConfig, brand: np.ndarray, store: np.ndarray,
    table: MisreportTable, tau: float,
) -> tuple[Tensor, Tensor]:
    """Differentiable mean revenue and per-bidder regret vector.

    One relaxed forward over the truthful batch stacked with one block per
    bidder holding that bidder's best misreport.
    """
    Y = brand.shape[0]
    who = bidders(config)
    blocks_b, blocks_s = [brand], [store]
    for side, k in who:
        b2, s2 = np.array(brand), np.array(store)
        (b2 if side == "brand" else s2)[:, k] *= table.coef((side, k))
        blocks_b.append(b2)
        blocks_s.append(s2)
    f = forward_batch(params, config, np.concatenate(blocks_b), np.concatenate(blocks_s), "soft", tau)
    true_b = np.tile(brand, (len(who) + 1, 1))
    true_s = np.tile(store, (len(who) + 1, 1))
    u_b = ad.sub(ad.mul(f.ctr_brand, true_b), f.pay_brand)
    u_s = ad.sub(ad.mul(f.ctr_store, true_s), f.pay_store)

    truthful_rows = np.arange(Y)
    revenue = ad.mean(ad.index_select(f.revenue(), truthful_rows, axis=0))
    regrets = []
    for block, (side, k) in enumerate(who, start=1):
        u = u_b if side == "brand" else u_s
        col = ad.index_select(u, [k], axis=1)
        mis = ad.index_select(col, np.arange(block * Y, (block + 1) * Y), axis=0)
        tru = ad.index_select(col, truthful_rows, axis=0)
        regrets.append(ad.mean(ad.relu(ad.sub(mis, tru)), axis=0))
    return revenue, ad.concat(regrets, axis=0)


def lagrangian(revenue: Tensor, regret: Tensor, lam: np.ndarray, rho: float) -> Tensor:
    """-revenue + sum(lambda * rgt) + rho / 2 * sum(rgt ** 2)."""
    penalty = ad.reduce_sum(ad.mul(regret, np.asarray(lam, dtype=np.float64)))
    quad = ad.scale(ad.reduce_sum(ad.mul(regret, regret)), rho / 2.0)
    return ad.add(ad.sub(quad, revenue), penalty)


def lagrangian_loss(
    params: ModelParams, config: AuctionConfig, brand: np.ndarray, store: np.ndarray,
    table: MisreportTable, lam: np.ndarray, rho: float, tau: float | None = None,
) -> LossTerms:
    revenue, regret = regret_terms(params, config, brand, store, table, params.tau if tau is None else tau)
    loss = lagrangian(revenue, regret, lam, rho)
    return LossTerms(loss, revenue, regret)


# ------------------------------------------------------------------ optimizer


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ModelParams) -> None:
        self.step_count += 1
        c1 = 1 - self.beta1 ** self.step_count
        c2 = 1 - self.beta2 ** self.step_count
        for name, w in params.weights.items():
            g = w.grad
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(w.data))
            v = self.v.setdefault(name, np.zeros_like(w.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            w.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ training


@dataclass
class TrainState:
    params: ModelParams
    lambda_brand: np.ndarray
    lambda_store: np.ndarray
    optimizer: Adam
    t: int = 0

    @property
    def lam(self) -> np.ndarray:
        return np.concatenate([self.lambda_brand, self.lambda_store])


@dataclass
class StepLog:
    t: int
    loss: float
    revenue: float
    mean_regret: float
    rho: float
    tau: float
    lambda_norm_brand: float
    lambda_norm_store: float
    lambda_updated: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def update_lambda(state: TrainState, regret_brand, regret_store, rho: float, period: int) -> bool:
    """lambda += rho * rgt when ``state.t`` is a multiple of ``period``."""
    if state.t % period:
        return False
    state.lambda_brand = state.lambda_brand + rho * np.asarray(regret_brand)
    state.lambda_store = state.lambda_store + rho * np.asarray(regret_store)
    return True


class Trainer:
    """Owns the mutable training state for one auction configuration."""

    def __init__(self, config: AuctionConfig, train_config: TrainConfig, params: ModelParams | None = None):
        self.config = config
        self.tc = train_config
        params = params if params is not None else ModelParams.init(seed=train_config.seed, tau=train_config.tau)
        self.state = TrainState(
            params=params,
            lambda_brand=np.full(config.num_brands, train_config.lambda_init, dtype=np.float64),
            lambda_store=np.full(config.num_stores, train_config.lambda_init, dtype=np.float64),
            optimizer=Adam(lr=train_config.learning_rate),
        )
        self.history: list[StepLog] = []

    def soft_mechanism(self, tau: float) -> "SoftMechanism":
        return SoftMechanism(self.state.params, self.config, tau)

    def step(self, brand: np.ndarray, store: np.ndarray) -> StepLog:
        st, tc = self.state, self.tc
        t = st.t
        rho, tau = tc.rho_at(t), tc.tau_at(t)
        table = best_misreports(self.soft_mechanism(tau), brand, store, tc.misreport_grid)

        st.params.zero_grad()
        terms = lagrangian_loss(st.params, self.config, brand, store, table, st.lam, rho, tau)
        terms.loss.backward()
        bad = [n for n, w in st.params.weights.items() if w.grad is not None and not np.all(np.isfinite(w.grad))]
        if bad:
            raise TrainingError(f"non-finite gradient at iteration {t} in {bad}; loss={terms.loss.item()}")
        st.optimizer.step(st.params)

        updated = False
        if t % tc.lambda_period == 0:
            new_table = best_misreports(self.soft_mechanism(tau), brand, store, tc.misreport_grid)
            rb, rs = new_table.regrets()
            updated = update_lambda(st, rb, rs, rho, tc.lambda_period)

        entry = StepLog(
            t=t,
            loss=terms.loss.item(),
            revenue=terms.revenue.item(),
            mean_regret=float(terms.regret.data.mean()),
            rho=rho,
            tau=tau,
            lambda_norm_brand=float(np.linalg.norm(st.lambda_brand)),
            lambda_norm_store=float(np.linalg.norm(st.lambda_store)),
            lambda_updated=updated,
        )
        st.t += 1
        self.history.append(entry)
        return entry

    def run(self, brand: np.ndarray, store: np.ndarray, callback: Callable[[StepLog], None] | None = None) -> ModelParams:
        for bb, sb in minibatches(brand, store, self.tc.batch_size, self.tc.iterations - self.state.t, self.tc.seed):
            entry = self.step(bb, sb)
            if callback is not None:
                callback(entry)
            if self.tc.log_every and entry.t % self.tc.log_every == 0:
                log.info(
                    "iter %d loss %.5f rev %.4f rgt %.5f rho %.1f |lam| %.3f/%.3f",
                    entry.t, entry.loss, entry.revenue, entry.mean_regret, entry.rho,
                    entry.lambda_norm_brand, entry.lambda_norm_store,
                )
        return self.state.params


def minibatches(brand: np.ndarray, store: np.ndarray, size: int, count: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """``count`` minibatches drawn by walking seeded permutations of the dataset."""
    L = brand.shape[0]
    if L < 1:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(L)
    pos = 0
    for _ in range(max(count, 0)):
        take = []
        while len(take) < size:
            if pos == L:
                order = rng.permutation(L)
                pos = 0
            n = min(size - len(take), L - pos)
            take.extend(order[pos:pos + n])
            pos += n
        sel = np.asarray(take)
        yield brand[sel], store[sel]


class SoftMechanism:
    """Relaxed-allocation mechanism used during training's misreport search."""

    name = "JTransNet-soft"

    def __init__(self, params: ModelParams, config: AuctionConfig, tau: float):
        self.params = params
        self.config = config
        self.tau = tau

    def run(self, brand_bids, store_bids) -> Outcome:
        with ad.no_grad():
            return forward_batch(self.params, self.config, brand_bids, store_bids, "soft", self.tau).outcome()


def train(brand: np.ndarray, store: np.ndarray, config: AuctionConfig, train_config: TrainConfig,
          params: ModelParams | None = None) -> ModelParams:
    """Run ``train_config.iterations`` steps and return the trained parameters."""
    return Trainer(config, train_config, params).run(brand, store)
