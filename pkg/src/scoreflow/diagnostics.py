"""Goodness-of-fit and distribution comparison tools.

Kernel Stein discrepancy with an RBF kernel needs only the score of the
model, so it works for unnormalized densities. The 1-D helpers (W1, QTE,
QQ) compare interventional or imputed samples with a reference.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, EmptyInput, EmptySample, TooFewSamples

BANDWIDTH_FLOOR = 1e-6
MEDIAN_PAIRS = 2000


@dataclass(frozen=True)
class RbfKernel:
    h: float

    def __post_init__(self):
        if not (math.isfinite(self.h) and self.h > 0):
            raise ValueError("bandwidth must be finite and positive")


@dataclass
class KsdResult:
    statistic: float
    p_value: float
    bandwidth: float
    n: int
    B: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def stein_kernel_u(x, xp, score_q: Callable, k: RbfKernel) -> float:
    """Stein kernel for a single pair with analytic RBF derivatives."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape:
        raise DimensionMismatch(f"{x.shape} vs {xp.shape}")
    S = score_q(np.vstack([x, xp]))
    return float(stein_kernel_matrix(np.vstack([x, xp]), S, k.h)[0, 1])


def stein_kernel_matrix(X: np.ndarray, S: np.ndarray, h: float) -> np.ndarray:
    """All pairwise ``u(x_i, x_j)`` given the sample ``X`` and its scores ``S``."""
    d = X.shape[1]
    h2 = h * h
    sq = np.sum(X * X, axis=1)
    r2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(r2, 0.0)
    K = np.exp(-r2 / (2.0 * h2))
    ss = S @ S.T
    sx = np.sum(S * X, axis=1)          # s_i . x_i
    SX = S @ X.T                        # SX[i, j] = s_i . x_j
    # s_i . (x_i - x_j) - s_j . (x_i - x_j)
    cross = (sx[:, None] - SX) - (SX.T - sx[None, :])
    return K * (ss + cross / h2 + d / h2 - r2 / (h2 * h2))


def _prepare(samples, score_q: Callable, k: RbfKernel | None):
    X = _as_rows(samples)
    if X.shape[0] < 2:
        raise TooFewSamples("need at least two samples")
    h = median_heuristic(X) if k is None else k.h
    S = _as_rows(score_q(X))
    if S.shape != X.shape:
        raise DimensionMismatch("score output shape differs from samples")
    U = stein_kernel_matrix(X, S, h)
    np.fill_diagonal(U, 0.0)
    return U, h


def ksd_ustat(samples, score_q: Callable, k: RbfKernel | None = None) -> float:
    """Unbiased U-statistic estimate of the squared KSD (diagonal excluded)."""
    U, _ = _prepare(samples, score_q, k)
    n = U.shape[0]
    return float(U.sum() / (n * (n - 1)))


def ksd_jackknife_se(samples, score_q: Callable, k: RbfKernel | None = None) -> float:
    """Leave-one-out jackknife standard error of the U-statistic."""
    U, _ = _prepare(samples, score_q, k)
    n = U.shape[0]
    if n < 3:
        raise TooFewSamples("jackknife needs at least three samples")
    tot = U.sum()
    loo = (tot - 2.0 * U.sum(axis=1)) / ((n - 1) * (n - 2))
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def ksd_wild_bootstrap(samples, score_q: Callable, k: RbfKernel | None, B: int,
                       rng: np.random.Generator) -> KsdResult:
    """KSD test with Rademacher multipliers applied to the off-diagonal terms.

    ``k=None`` selects the median-heuristic bandwidth.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    U, h = _prepare(samples, score_q, k)
    n = U.shape[0]
    norm = n * (n - 1)
    t_obs = U.sum() / norm
    W = rng.integers(0, 2, size=(B, n)) * 2.0 - 1.0
    t_b = np.einsum("bi,bi->b", W @ U, W) / norm
    # exact ties with the observed value count as exceedances
    p = (1.0 + np.sum(t_b >= t_obs - 1e-15 * abs(t_obs))) / (B + 1.0)
    return KsdResult(float(t_obs), float(p), float(h), int(n), int(B))


def median_heuristic(samples, rng: np.random.Generator | None = None) -> float:
    """Median pairwise distance, exact up to 2000 points, else 2000 random pairs."""
    X = _as_rows(samples)
    n = X.shape[0]
    if n < 2:
        raise TooFewSamples("need at least two samples")
    if n <= MEDIAN_PAIRS:
        iu = np.triu_indices(n, 1)
        dist = np.linalg.norm(X[iu[0]] - X[iu[1]], axis=1)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        i = rng.integers(0, n, size=MEDIAN_PAIRS)
        j = (i + rng.integers(1, n, size=MEDIAN_PAIRS)) % n
        dist = np.linalg.norm(X[i] - X[j], axis=1)
    return max(float(np.median(dist)), BANDWIDTH_FLOOR)


def _vec(a) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise EmptySample("sample is empty")
    return a


def w1_1d(a, b) -> float:
    """1-D Wasserstein-1 distance between two empirical laws.

    Equal sizes use sorted differences; otherwise the two quantile functions
    are compared piecewise on the union of their jump points.
    """
    a = np.sort(_vec(a))
    b = np.sort(_vec(b))
    na, nb = a.size, b.size
    if na == nb:
        return float(np.mean(np.abs(a - b)))
    grid = np.union1d(np.arange(1, na + 1) / na, np.arange(1, nb + 1) / nb)
    grid[-1] = 1.0
    widths = np.diff(np.concatenate([[0.0], grid]))
    mid = grid - 0.5 * widths
    qa = a[np.minimum((mid * na).astype(int), na - 1)]
    qb = b[np.minimum((mid * nb).astype(int), nb - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


def qte(s1, s0, alpha: float) -> float:
    """Quantile treatment effect ``Q_alpha(s1) - Q_alpha(s0)``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(np.quantile(_vec(s1), alpha) - np.quantile(_vec(s0), alpha))


def qq_points(a, b, grid: int = 99) -> np.ndarray:
    """Paired quantiles at probabilities ``(i - 1/2) / grid``; shape ``(grid, 2)``."""
    a, b = _vec(a), _vec(b)
    p = (np.arange(1, grid + 1) - 0.5) / grid
    return np.column_stack([np.quantile(a, p), np.quantile(b, p)])


def top_decile_gap(reference, candidate, grid: int = 99) -> float:
    """Mean ``reference - candidate`` quantile gap over the top 10% of the grid.

    Positive values mean the candidate's upper tail is too short.
    """
    q = qq_points(reference, candidate, grid)
    top = q[int(math.floor(0.9 * grid)):]
    return float(np.mean(top[:, 0] - top[:, 1]))


def coverage_check(intervals, truth: float) -> float:
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if iv.shape[0] == 0:
        raise EmptyInput("no intervals")
    return float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))


def write_qq_csv(path, points: np.ndarray, labels=("reference", "candidate")) -> None:
    points = np.asarray(points, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", f"q_{labels[0]}", f"q_{labels[1]}"])
        g = len(points)
        for i, (qa, qb) in enumerate(points):
            w.writerow([repr((i + 0.5) / g), repr(float(qa)), repr(float(qb))])
