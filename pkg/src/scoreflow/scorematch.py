"""Score matching estimators and Stein-identity tools.

Covers the one-dimensional quartic potential (a quadratic problem in the
parameters), ridge + l1 score matching for Gaussian graphical models with a
graphical-lasso baseline, Hutchinson divergence estimates, Stein residuals,
the James-Stein risk identity, and single-noise-level denoising score
matching.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import (DimensionMismatch, DimensionTooSmall, Divergence, EmptySample,
                     NoConvergence, NotPositiveDefinite, SingularSystem)
from .mlp import Mlp, TrainConfig, forward, init_mlp, loss_grad, train
from .numerics import cholesky, logdet_spd, op_norm_sym, solve_spd

# ---------------------------------------------------------------- quartic model


class QuarticTheta(NamedTuple):
    """Parameters of the unnormalized density ``exp(t1 x + t2 x^2 + t3 x^4)``."""

    t1: float
    t2: float
    t3: float


def quartic_score(theta, x):
    t1, t2, t3 = theta
    x = np.asarray(x, dtype=float)
    return t1 + 2.0 * t2 * x + 4.0 * t3 * x ** 3


def _quartic_features(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # score = phi(x) @ theta, derivative of score = psi(x) @ theta
    phi = np.stack([np.ones_like(x), 2.0 * x, 4.0 * x ** 3], axis=1)
    psi = np.stack([np.zeros_like(x), np.full_like(x, 2.0), 12.0 * x ** 2], axis=1)
    return phi, psi


def quartic_sm_objective(theta, samples) -> float:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("no samples")
    t1, t2, t3 = theta
    s = quartic_score(theta, x)
    return float(np.mean(0.5 * s * s + 2.0 * t2 + 12.0 * t3 * x * x))


def quartic_normal_equations(samples) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(G, b)`` with objective ``0.5 theta'G theta + b'theta``."""
    x = np.asarray(samples, dtype=float).ravel()
    phi, psi = _quartic_features(x)
    return phi.T @ phi / x.size, psi.mean(axis=0)


def quartic_sm_fit(samples) -> QuarticTheta:
    """Exact minimizer of the empirical score matching objective."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("no samples")
    gram, b = quartic_normal_equations(x)
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise SingularSystem("moment matrix is rank deficient")
    try:
        theta = solve_spd(cholesky(gram), -b)
    except NotPositiveDefinite:
        raise SingularSystem("moment matrix is rank deficient") from None
    return QuarticTheta(*map(float, theta))


# ---------------------------------------------------- Gaussian graphical model


@dataclass
class GgmProblem:
    S: np.ndarray
    lam: float = 0.0
    rho: float = 0.0
    max_iter: int = 500
    tol: float = 1e-9

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        if self.S.ndim != 2 or self.S.shape[0] != self.S.shape[1]:
            raise DimensionMismatch("S must be square")
        if np.max(np.abs(self.S - self.S.T), initial=0.0) > 1e-10 * max(1.0, np.abs(self.S).max()):
            raise ValueError("S must be symmetric")
        if self.lam < 0 or self.rho < 0:
            raise ValueError("lam and rho must be non-negative")


@dataclass
class GgmEstimate:
    K: np.ndarray
    shift: float = 0.0
    iterations: int = 0
    objective: list = field(default_factory=list)


def _offdiag_l1(K: np.ndarray) -> float:
    return float(np.abs(K).sum() - np.abs(np.diag(K)).sum())


def ggm_sm_objective(K, p: GgmProblem) -> float:
    """``0.5 tr(KSK) - tr(K) + rho/2 ||K||_F^2 + lam * sum_{i!=j} |K_ij|``."""
    K = np.asarray(K, dtype=float)
    if K.shape != p.S.shape:
        raise DimensionMismatch("K and S differ in shape")
    quad = 0.5 * float(np.sum((K @ p.S) * K))  # tr(K S K) for symmetric K
    return quad - float(np.trace(K)) + 0.5 * p.rho * float(np.sum(K * K)) + p.lam * _offdiag_l1(K)


def soft_threshold_offdiag(K: np.ndarray, thr: float) -> np.ndarray:
    out = np.sign(K) * np.maximum(np.abs(K) - thr, 0.0)
    np.fill_diagonal(out, np.diag(K))
    return out


def _min_eig_shift(K: np.ndarray) -> tuple[np.ndarray, float]:
    lmin = float(np.linalg.eigvalsh(K)[0])
    if lmin > 0:
        return K, 0.0
    shift = abs(lmin) + 1e-8
    return K + shift * np.eye(K.shape[0]), shift


def ggm_sm_prox_fit(p: GgmProblem, K0=None, track: bool = False) -> GgmEstimate:
    """Proximal gradient for ridge + off-diagonal l1 score matching.

    Step ``0.9 / (||S||_2 + rho)``; off-diagonals are soft-thresholded at
    ``step * lam``; the iterate is symmetrized every step and a minimum
    eigenvalue shift is applied once at the end if needed.
    """
    S = p.S
    d = S.shape[0]
    try:
        snorm = op_norm_sym(S)
    except NoConvergence:
        snorm = float(np.linalg.norm(S))
    eta = 0.9 / (snorm + p.rho)
    eye = np.eye(d)
    K = eye.copy() if K0 is None else np.array(K0, dtype=float)
    hist = [ggm_sm_objective(K, p)] if track else []
    it = 0
    for it in range(1, p.max_iter + 1):
        SK = S @ K
        G = 0.5 * (SK + SK.T) - eye + p.rho * K  # K S = (S K)^T for symmetric K, S
        Kn = soft_threshold_offdiag(K - eta * G, eta * p.lam)
        Kn = 0.5 * (Kn + Kn.T)
        step = float(np.linalg.norm(Kn - K))
        K = Kn
        if track:
            hist.append(ggm_sm_objective(K, p))
        if step < p.tol:
            break
    K, shift = _min_eig_shift(K)
    return GgmEstimate(K, shift, it, hist)


def glasso_objective(K, S, alpha: float) -> float:
    f = cholesky(K)
    return float(np.sum(S * K)) - logdet_spd(f) + alpha * _offdiag_l1(K)


def glasso_fit(S, alpha: float, iters: int = 500, tol: float = 1e-9,
               track: bool = False) -> GgmEstimate:
    """Graphical lasso by proximal gradient with backtracking.

    Minimizes ``tr(SK) - log det K + alpha * sum_{i!=j}|K_ij|``. Every trial
    iterate is Cholesky-factored; the step is halved until the trial point is
    SPD and satisfies the usual sufficient-decrease condition, so all accepted
    iterates are SPD and the objective never increases.
    """
    S = np.asarray(S, dtype=float)
    d = S.shape[0]
    K = np.diag(1.0 / (np.diag(S) + alpha + 1e-12))
    fac = cholesky(K)
    inv = solve_spd(fac, np.eye(d))
    smooth = float(np.sum(S * K)) - logdet_spd(fac)
    obj = smooth + alpha * _offdiag_l1(K)
    hist = [obj] if track else []
    eta = 1.0
    it = 0
    for it in range(1, iters + 1):
        G = S - inv
        eta = min(eta * 2.0, 1e6)
        while True:
            Kn = soft_threshold_offdiag(K - eta * G, eta * alpha)
            Kn = 0.5 * (Kn + Kn.T)
            try:
                fn = cholesky(Kn)
            except NotPositiveDefinite:
                eta *= 0.5
                continue
            sm_n = float(np.sum(S * Kn)) - logdet_spd(fn)
            diff = Kn - K
            if sm_n <= smooth + float(np.sum(G * diff)) + float(np.sum(diff * diff)) / (2 * eta) + 1e-12 * abs(smooth):
                break
            eta *= 0.5
            if eta < 1e-16:
                break
        change = float(np.linalg.norm(Kn - K)) / max(float(np.linalg.norm(K)), 1e-300)
        K, fac, smooth = Kn, fn, sm_n
        inv = solve_spd(fac, np.eye(d))
        if track:
            hist.append(smooth + alpha * _offdiag_l1(K))
        if change < tol:
            break
    return GgmEstimate(K, 0.0, it, hist)


def sample_covariance(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / X.shape[0]


def random_sparse_precision(d: int, rng: np.random.Generator, edge_prob: float = 0.01,
                            low: float = 0.3, high: float = 0.6) -> np.ndarray:
    """Sparse symmetric precision with a diagonal-dominance adjustment.

    Each off-diagonal pair is an edge with probability ``edge_prob`` and gets
    a weight of random sign and magnitude in ``[low, high]``; the diagonal is
    then set to one plus the absolute row sum, so the matrix is SPD.
    """
    K = np.zeros((d, d))
    iu = np.triu_indices(d, 1)
    edges = rng.random(iu[0].size) < edge_prob
    vals = rng.uniform(low, high, size=edges.sum()) * rng.choice([-1.0, 1.0], size=edges.sum())
    K[iu[0][edges], iu[1][edges]] = vals
    K = K + K.T
    np.fill_diagonal(K, 1.0 + np.abs(K).sum(axis=1))
    return K


def rmse(A, B) -> float:
    A = np.asarray(A)
    return float(np.sqrt(np.mean((A - np.asarray(B)) ** 2)))


@dataclass
class GgmBenchRow:
    rep: int
    rmse_mle: float
    ct_mle_sec: float
    rmse_sm: float
    ct_sm_sec: float


def ggm_benchmark(d: int, n: int, reps: int, lam: float, rho: float, alpha: float,
                  rng: np.random.Generator, iters: int = 500, tol: float = 1e-7,
                  edge_prob: float = 0.01) -> list[GgmBenchRow]:
    """RMSE and wall-clock comparison of glasso against ridge-l1 score matching."""
    rows = []
    for r in range(reps):
        Kstar = random_sparse_precision(d, rng, edge_prob)
        L = np.linalg.cholesky(np.linalg.inv(Kstar))
        X = rng.standard_normal((n, d)) @ L.T
        S = sample_covariance(X)
        t0 = time.perf_counter()
        mle = glasso_fit(S, alpha, iters=iters, tol=tol)
        t1 = time.perf_counter()
        sm = ggm_sm_prox_fit(GgmProblem(S, lam, rho, max_iter=iters, tol=tol))
        t2 = time.perf_counter()
        rows.append(GgmBenchRow(r, rmse(mle.K, Kstar), t1 - t0, rmse(sm.K, Kstar), t2 - t1))
    return rows


# ---------------------------------------------------------- Stein-type tools


def _rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape) * 2.0 - 1.0


def hutchinson_divergence(field: Callable, x, probes: int, rng: np.random.Generator,
                          jacobian=None, h: float = 1e-5) -> float:
    """Stochastic trace of the field Jacobian at ``x`` with Rademacher probes.

    ``field`` maps an ``(m, d)`` batch to an ``(m, d)`` batch. Jacobian-vector
    products use central differences with step ``h`` unless an explicit
    ``jacobian`` matrix is supplied.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    x = np.asarray(x, dtype=float).ravel()
    eps = _rademacher(rng, (probes, x.size))
    if jacobian is not None:
        A = np.asarray(jacobian, dtype=float)
        return float(np.mean(np.einsum("pi,ij,pj->p", eps, A, eps)))
    fp = np.asarray(field(x + h * eps), dtype=float)
    fm = np.asarray(field(x - h * eps), dtype=float)
    jvp = (fp - fm) / (2.0 * h)
    return float(np.mean(np.sum(eps * jvp, axis=1)))


def fd_divergence(f: Callable, X, h: float = 1e-5) -> np.ndarray:
    """Exact divergence by central differences, one coordinate at a time."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    div = np.zeros(X.shape[0])
    for j in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[j] = h
        div += (np.asarray(f(X + e))[:, j] - np.asarray(f(X - e))[:, j]) / (2.0 * h)
    return div


def stein_residual(score: Callable, f: Callable, samples, h: float = 1e-5) -> tuple[float, float]:
    """Mean and standard error of ``s(X)'f(X) + div f(X)`` over the samples."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise EmptySample("no samples")
    vals = np.sum(np.asarray(score(X)) * np.asarray(f(X)), axis=1) + fd_divergence(f, X, h)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


class RiskEstimate(NamedTuple):
    risk_direct: float
    risk_stein: float
    se_direct: float
    se_stein: float


def james_stein_shrinkage(d: int):
    """Shrinkage term ``g(x) = -(d-2) x / ||x||^2`` and its divergence."""
    def g(X):
        return -(d - 2) * X / np.sum(X * X, axis=1, keepdims=True)

    def div(X):
        return -((d - 2) ** 2) / np.sum(X * X, axis=1)

    return g, div


def james_stein_risk(d: int, mu, n_mc: int, rng: np.random.Generator,
                     shrinkage: str | tuple = "james-stein") -> RiskEstimate:
    """Risk of ``delta(X) = X + g(X)`` under ``X ~ N(mu, I_d)`` two ways.

    ``risk_direct`` averages ``||delta(X) - mu||^2``; ``risk_stein`` averages
    ``d + 2 div g(X) + ||g(X)||^2``. ``shrinkage`` is ``"james-stein"``,
    ``"zero"`` or a ``(g, div_g)`` pair of batch callables.
    """
    if d < 3:
        raise DimensionTooSmall("the shrinkage identity needs d >= 3")
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (d,))
    X = mu + rng.standard_normal((n_mc, d))
    if shrinkage == "james-stein":
        g, div = james_stein_shrinkage(d)
    elif shrinkage == "zero":
        g, div = (lambda Z: np.zeros_like(Z)), (lambda Z: np.zeros(Z.shape[0]))
    else:
        g, div = shrinkage
    G = g(X)
    direct = np.sum((X + G - mu) ** 2, axis=1)
    stein = d + 2.0 * div(X) + np.sum(G * G, axis=1)
    rt = math.sqrt(n_mc)
    return RiskEstimate(float(direct.mean()), float(stein.mean()),
                        float(direct.std(ddof=1) / rt), float(stein.std(ddof=1) / rt))


# ------------------------------------------------- denoising score matching


def dsm_dataset(samples, sigma: float, rng: np.random.Generator, copies: int = 10):
    """Noisy inputs ``y = x + sigma*xi`` and denoising targets ``(x - y)/sigma^2``."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Xr = np.repeat(X, copies, axis=0)
    xi = rng.standard_normal(Xr.shape)
    Y = Xr + sigma * xi
    return Y, -xi / sigma


def dsm_fit(samples, sigma: float, cfg: TrainConfig, rng: np.random.Generator,
            copies: int = 10) -> Mlp:
    """Train a score network for the Gaussian-smoothed data density."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    Y, T = dsm_dataset(samples, sigma, rng, copies)
    return train(Y, T, cfg, rng)


def dsm_loss(model: Mlp, samples, sigma: float, rng: np.random.Generator,
             copies: int = 10) -> tuple[float, float]:
    """Held-out DSM loss of ``model`` and of the best constant predictor."""
    Y, T = dsm_dataset(samples, sigma, rng, copies)
    pred = forward(model, Y)
    const = T.mean(axis=0)
    return float(np.mean(np.sum((pred - T) ** 2, axis=1))), float(np.mean(np.sum((T - const) ** 2, axis=1)))
