"""Test-time auditing of a mechanism on held-out value profiles.

A mechanism is anything with a ``config`` attribute, ``run(brand, store)``
returning an :class:`Outcome` for a batch, and ``with_config(config)`` for
the anonymity check. Regret is measured on the deployed outcome (hard
allocation for JTransNet) by enumerating misreports over a coefficient grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .auction import Outcome
from .trainer import best_misreports, default_grid

IR_TOL = 1e-12


@dataclass
class EvalReport:
    revenue: float
    revenue_se: float
    welfare: float
    welfare_se: float
    regret: float
    regret_brand: np.ndarray
    regret_store: np.ndarray
    ir_violations: int
    determinism_pass: bool
    anonymity_max_dev: float | None = None
    num_samples: int = 0
    per_sample_revenue: np.ndarray = field(default=None, repr=False)

    def row(self) -> dict:
        out = {
            "rev": self.revenue, "rev_se": self.revenue_se,
            "sw": self.welfare, "sw_se": self.welfare_se,
            "rgt": self.regret, "ir_violations": self.ir_violations,
            "deterministic": self.determinism_pass, "samples": self.num_samples,
        }
        if self.anonymity_max_dev is not None:
            out["anonymity_max_dev"] = self.anonymity_max_dev
        return out


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def evaluate(mechanism, brand: np.ndarray, store: np.ndarray, grid: Sequence[float] | None = None,
             anonymity_permutations: int = 0, seed: int = 0) -> EvalReport:
    brand = np.atleast_2d(np.asarray(brand, dtype=np.float64))
    store = np.atleast_2d(np.asarray(store, dtype=np.float64))
    if brand.shape[0] == 0:
        raise ValueError("empty test set")
    grid = default_grid() if grid is None else tuple(grid)
    out = mechanism.run(brand, store)
    rev = out.revenue()
    sw = (brand * out.ctr_brand).sum(axis=-1) + (store * out.ctr_store).sum(axis=-1)
    table = best_misreports(mechanism, brand, store, grid)
    rb, rs = table.regrets()
    anonymity = None
    if anonymity_permutations:
        anonymity = check_anonymity(mechanism, brand, store, anonymity_permutations, seed)
    return EvalReport(
        revenue=float(rev.mean()), revenue_se=_se(rev),
        welfare=float(sw.mean()), welfare_se=_se(sw),
        regret=float(np.concatenate([rb, rs]).mean()),
        regret_brand=rb, regret_store=rs,
        ir_violations=check_ir(out, brand, store),
        determinism_pass=check_deterministic(out.alloc).passed,
        anonymity_max_dev=anonymity,
        num_samples=brand.shape[0],
        per_sample_revenue=rev,
    )


# ------------------------------------------------------------------ properties


def check_anonymity(mechanism, brand: np.ndarray, store: np.ndarray, num_permutations: int,
                    seed: int = 0, identity: bool = False) -> float:
    """Max |outcome of relabeled input - relabeled outcome| over random relabelings.

    Each test draws one brand permutation and one store permutation, applies
    them to the relation matrix and to every profile in the batch, and
    compares payments, bidder allocations and bundle allocations.
    """
    if num_permutations < 1:
        raise ValueError("need at least one permutation")
    brand = np.atleast_2d(np.asarray(brand, dtype=np.float64))
    store = np.atleast_2d(np.asarray(store, dtype=np.float64))
    config = mechanism.config
    m, n = config.num_brands, config.num_stores
    rng = np.random.default_rng(seed)
    base = mechanism.run(brand, store)
    old_pos = {pair: c for c, pair in enumerate(zip(*np.nonzero(config.relation)))}
    worst = 0.0
    for _ in range(num_permutations):
        bp = np.arange(m) if identity else rng.permutation(m)
        sp = np.arange(n) if identity else rng.permutation(n)
        pconf = config.permuted(bp, sp)
        out = mechanism.with_config(pconf).run(brand[:, bp], store[:, sp])
        # new bundle (i, j) is old bundle (bp[i], sp[j])
        remap = [old_pos[(bp[i], sp[j])] for i, j in zip(*np.nonzero(pconf.relation))]
        devs = [
            np.abs(out.pay_brand - base.pay_brand[:, bp]).max(),
            np.abs(out.pay_store - base.pay_store[:, sp]).max(),
            np.abs(out.alloc_brand - base.alloc_brand[:, bp]).max(),
            np.abs(out.alloc_store - base.alloc_store[:, sp]).max(),
            np.abs(out.alloc - base.alloc[:, remap]).max(),
        ]
        worst = max(worst, float(max(devs)))
    return worst


@dataclass
class DeterminismResult:
    passed: bool
    problems: list[str] = field(default_factory=list)


def check_deterministic(alloc: np.ndarray, tol: float = 1e-9, max_problems: int = 20) -> DeterminismResult:
    """Every bundle-by-slot matrix binary, one 1 per column, at most one per row."""
    s = np.asarray(alloc, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    problems = []
    nonbinary = np.argwhere(~((np.abs(s) <= tol) | (np.abs(s - 1) <= tol)))
    for b, c, k in nonbinary[:max_problems]:
        problems.append(f"sample {b}: entry (bundle {c}, slot {k}) = {s[b, c, k]:.6g} is not 0/1")
    cols = np.argwhere(np.abs(s.sum(axis=1) - 1) > tol)
    for b, k in cols[:max_problems]:
        problems.append(f"sample {b}: slot {k} column sums to {s[b, :, k].sum():.6g}")
    rows = np.argwhere(s.sum(axis=2) > 1 + tol)
    for b, c in rows[:max_problems]:
        problems.append(f"sample {b}: bundle {c} holds {s[b, c].sum():.6g} slots")
    passed = not (len(nonbinary) or len(cols) or len(rows))
    return DeterminismResult(passed, problems)


def check_ir(out: Outcome, brand: np.ndarray, store: np.ndarray, tol: float = IR_TOL) -> int:
    """Number of (sample, bidder) utilities below -tol under truthful bids."""
    u_b = np.asarray(brand) * out.ctr_brand - out.pay_brand
    u_s = np.asarray(store) * out.ctr_store - out.pay_store
    return int((u_b < -tol).sum() + (u_s < -tol).sum())


# ------------------------------------------------------------------ statistics


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b)."""
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1) / (a + b + 2):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p_value: float
    df: int
    mean_diff: float
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Paired t-test of mean(a - b) = 0, two-sided."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d arrays of equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    df = d.size - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, 0.0, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, mean, degenerate=True)
    t = mean / (sd / math.sqrt(d.size))
    return TTestResult(t, t_two_sided_p(t, df), df, mean)
