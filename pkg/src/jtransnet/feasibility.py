"""Can a probabilistic bundle-by-slot matrix be run as a lottery over
deterministic allocations that fill every slot?

``lottery_decompose`` answers exactly: it enumerates all injective
slot -> bundle maps and solves the linear feasibility problem

    sum_x Pr_x [x puts c in k] = s'_ck   for all c, k
    sum_x Pr_x = 1,  Pr >= 0

with a phase-one simplex. Grid inputs run in rational arithmetic so the
feasible/infeasible boundary is crisp; floats use a 1e-9 tolerance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

TOL = 1e-9
MAX_ASSIGNMENTS = 10**6


class EnumerationTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class LotteryDistribution:
    """Lottery over full assignments; ``assignments[x][k]`` is the bundle in slot k."""

    assignments: tuple[tuple[int, ...], ...]
    probs: tuple

    def matrix(self, num_bundles: int) -> np.ndarray:
        K = len(self.assignments[0]) if self.assignments else 0
        out = np.zeros((num_bundles, K))
        for a, p in zip(self.assignments, self.probs):
            for k, c in enumerate(a):
                out[c, k] += float(p)
        return out

    def max_reconstruction_error(self, s_prime) -> float:
        s = np.asarray(s_prime, dtype=np.float64)
        return float(np.abs(self.matrix(s.shape[0]) - s).max())


def enumerate_full_assignments(C: int, K: int) -> list[tuple[int, ...]]:
    """All C!/(C-K)! injective slot -> bundle maps in lexicographic order."""
    if C < K:
        raise ValueError(f"cannot fill {K} slots with {C} bundles")
    if math.perm(C, K) > MAX_ASSIGNMENTS:
        raise EnumerationTooLarge(f"{math.perm(C, K)} assignments exceed the limit of {MAX_ASSIGNMENTS}")
    return list(itertools.permutations(range(C), K))


def necessary_condition(s_prime, tol: float = TOL) -> bool:
    """Every column sums to 1 and every row sums to at most 1."""
    rows = [list(r) for r in s_prime]
    if not rows:
        return False
    exact = all(isinstance(v, (int, Fraction)) for r in rows for v in r)
    tol = 0 if exact else tol
    K = len(rows[0])
    cols_ok = all(abs(sum(r[k] for r in rows) - 1) <= tol for k in range(K))
    rows_ok = all(sum(r) <= 1 + tol for r in rows)
    return bool(cols_ok and rows_ok)


def to_fractions(s_prime) -> list[list[Fraction]]:
    """Exact rationals; floats are read through their shortest decimal repr."""
    return [[v if isinstance(v, Fraction) else Fraction(str(v)) for v in row] for row in np.asarray(s_prime, dtype=object)]


def _phase_one(A: list[list], b: list, zero, tol) -> list | None:
    """Feasible x >= 0 with A x = b (b >= 0), or None. Bland's rule pivoting."""
    m, n = len(A), len(A[0])
    # tableau columns: n originals, m artificials, rhs
    T = [list(A[i]) + [zero] * m + [b[i]] for i in range(m)]
    for i in range(m):
        T[i][n + i] = zero + 1
    basis = [n + i for i in range(m)]
    width = n + m
    # reduced costs for minimizing the sum of artificials
    cost = [zero] * (width + 1)
    for i in range(m):
        for j in range(width + 1):
            if j < n or j == width:
                cost[j] -= T[i][j]

    while True:
        enter = next((j for j in range(width) if cost[j] < -tol), None)
        if enter is None:
            break
        best, leave = None, None
        for i in range(m):
            a = T[i][enter]
            if a > tol:
                ratio = T[i][width] / a
                if best is None or ratio < best - tol or (abs(ratio - best) <= tol and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:  # unbounded cannot happen in phase one
            return None
        piv = T[leave][enter]
        T[leave] = [v / piv for v in T[leave]]
        for i in range(m):
            if i != leave and T[i][enter] != 0:
                f = T[i][enter]
                T[i] = [vi - f * vl for vi, vl in zip(T[i], T[leave])]
        f = cost[enter]
        cost = [vc - f * vl for vc, vl in zip(cost, T[leave])]
        basis[leave] = enter

    if -cost[width] > tol:
        return None
    x = [zero] * n
    for i, j in enumerate(basis):
        if j < n:
            x[j] = T[i][width]
    return x


def lottery_decompose(s_prime, exact: bool | None = None) -> LotteryDistribution | None:
    """Lottery over full deterministic assignments reproducing ``s_prime``, or None.

    Rational arithmetic by default (floats enter through their shortest
    decimal repr); ``exact=False`` switches to floats with a 1e-9 tolerance.
    """
    arr = np.asarray(s_prime, dtype=object)
    C, K = arr.shape
    assignments = enumerate_full_assignments(C, K)
    if exact is None or exact:
        s = to_fractions(arr)
        zero, tol = Fraction(0), 0
    else:
        s = [[float(v) for v in row] for row in arr]
        zero, tol = 0.0, TOL
    if any(v < -tol or v > 1 + tol for row in s for v in row):
        return None

    A = []
    b = []
    for c in range(C):
        for k in range(K):
            A.append([zero + (1 if a[k] == c else 0) for a in assignments])
            b.append(max(s[c][k], zero))
    A.append([zero + 1] * len(assignments))
    b.append(zero + 1)
    x = _phase_one(A, b, zero, tol)
    if x is None:
        return None
    keep = [(a, p) for a, p in zip(assignments, x) if p > tol]
    total = sum(p for _, p in keep)
    probs = tuple(p / total for _, p in keep) if not exact else tuple(p for _, p in keep)
    return LotteryDistribution(tuple(a for a, _ in keep), probs)


# ------------------------------------------------------------------ surveys


Sampler = Callable[[np.random.Generator, int, int], np.ndarray]


def uniform_substochastic(rng: np.random.Generator, C: int, K: int) -> np.ndarray:
    """Uniform entries, scaled down so no row or column sum exceeds 1."""
    s = rng.uniform(size=(C, K))
    return s / max(1.0, s.sum(axis=1).max(), s.sum(axis=0).max())


def column_stochastic(rng: np.random.Generator, C: int, K: int, max_tries: int = 10000) -> np.ndarray:
    """Dirichlet columns (each sums to 1), redrawn until every row sums to at most 1."""
    for _ in range(max_tries):
        s = rng.dirichlet(np.ones(C), size=K).T
        if np.all(s.sum(axis=1) <= 1):
            return s
    raise RuntimeError("could not draw a column-stochastic matrix with row sums <= 1")


def hard_assignment(rng: np.random.Generator, C: int, K: int) -> np.ndarray:
    chosen = rng.permutation(C)[:K]
    s = np.zeros((C, K))
    s[chosen, np.arange(K)] = 1.0
    return s


SAMPLERS: dict[str, Sampler] = {
    "uniform": uniform_substochastic,
    "column-stochastic": column_stochastic,
    "hard": hard_assignment,
}


def infeasibility_survey(C: int, K: int, num_samples: int, sampler: Sampler | str = "uniform",
                         seed: int = 0) -> float:
    """Fraction of sampled matrices that no full-assignment lottery realizes."""
    if isinstance(sampler, str):
        sampler = SAMPLERS[sampler]
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(num_samples):
        if lottery_decompose(sampler(rng, C, K), exact=False) is None:
            bad += 1
    return bad / num_samples if num_samples else 0.0


def decimal_grid(C: int, K: int, steps: int = 10) -> list[list[list[Fraction]]]:
    """All C x K matrices with entries in {0, 1/steps, ..., 1} whose rows and
    columns sum to at most 1."""
    vals = [Fraction(i, steps) for i in range(steps + 1)]
    cols = [c for c in itertools.product(range(steps + 1), repeat=C) if sum(c) <= steps]
    out = []
    for combo in itertools.product(cols, repeat=K):
        if all(sum(col[r] for col in combo) <= steps for r in range(C)):
            out.append([[vals[combo[k][r]] for k in range(K)] for r in range(C)])
    return out


def grid_agreement(C: int = 3, K: int = 2, steps: int = 10) -> dict:
    """Compare the LP verdict with the column/row-sum condition on the grid."""
    checked = feasible = 0
    disagreements: list = []
    worst = Fraction(0)
    for s in decimal_grid(C, K, steps):
        checked += 1
        lottery = lottery_decompose(s, exact=True)
        cond = necessary_condition(s)
        if (lottery is not None) != cond:
            disagreements.append(s)
        if lottery is not None:
            feasible += 1
            rec = [[Fraction(0)] * K for _ in range(C)]
            for a, p in zip(lottery.assignments, lottery.probs):
                for k, c in enumerate(a):
                    rec[c][k] += p
            worst = max(worst, max(abs(rec[c][k] - s[c][k]) for c in range(C) for k in range(K)))
    return {"checked": checked, "feasible": feasible, "disagreements": disagreements,
            "max_reconstruction_error": float(worst)}
