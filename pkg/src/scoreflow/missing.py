"""Multiple imputation with a conditional flow or chained Gaussian engine.

Masked cells are stored as NaN in ``X`` so that any code path that reads a
missing value poisons its result; the boolean mask ``M`` is the source of
truth for which cells are missing. The MNAR sensitivity tools solve the
KL-ball exponential tilt by bisection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .cfm import FlowModel, conditional_cfm_train
from .errors import BadColumns, NoSolutionInBracket, TooFewComplete, TooFewImputations
from .mlp import TrainConfig

MIN_COMPLETE = 50


@dataclass
class MaskedDataset:
    X: np.ndarray          # NaN at masked cells
    M: np.ndarray          # True where missing

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.M = np.asarray(self.M, dtype=bool)
        if self.X.shape != self.M.shape:
            raise ValueError("X and M must have the same shape")
        self.X = np.where(self.M, np.nan, self.X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def missing_columns(self) -> list[int]:
        return [j for j in range(self.X.shape[1]) if self.M[:, j].any()]

    def rate(self, j: int) -> float:
        return float(self.M[:, j].mean())


def mar_mask(X, target: int, weights: dict, w0: float, rng: np.random.Generator) -> MaskedDataset:
    """Mask ``X[:, target]`` with probability ``logistic(w0 + sum_k w_k x_k)``.

    ``weights`` maps column index to coefficient; it may only reference
    columns other than the target.
    """
    X = np.asarray(X, dtype=float)
    cols = list(weights)
    if target in cols or any(not 0 <= c < X.shape[1] for c in cols):
        raise BadColumns("weights must reference observed columns other than the target")
    eta = w0 + (X[:, cols] @ np.array([weights[c] for c in cols]) if cols else 0.0)
    p = 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))
    M = np.zeros(X.shape, dtype=bool)
    M[:, target] = rng.random(X.shape[0]) < p
    return MaskedDataset(X, M)


def _split_target(md: MaskedDataset, target: int):
    if md.M[:, [j for j in range(md.X.shape[1]) if j != target]].any():
        raise BadColumns("only the target column may have missing cells")
    obs = ~md.M[:, target]
    if obs.sum() < MIN_COMPLETE:
        raise TooFewComplete(f"only {int(obs.sum())} observed rows in column {target}")
    others = [j for j in range(md.X.shape[1]) if j != target]
    return obs, others


def fm_imputer_train(md: MaskedDataset, target: int, cfg: TrainConfig,
                     rng: np.random.Generator) -> FlowModel:
    """Conditional flow for the target column given all other columns."""
    obs, others = _split_target(md, target)
    C = md.X[obs][:, others]
    y = md.X[obs, target]
    return conditional_cfm_train(C, y, cfg, rng, standardize=True)


def fm_impute(model: FlowModel, md: MaskedDataset, target: int, rng: np.random.Generator,
              steps: int = 50) -> np.ndarray:
    """One completed copy of the data with flow draws in the masked cells."""
    from .ode import OdeConfig

    out = md.X.copy()
    miss = md.M[:, target]
    if miss.any():
        others = [j for j in range(md.X.shape[1]) if j != target]
        draws = model.sample(int(miss.sum()), rng, cond=md.X[miss][:, others],
                             cfg=OdeConfig(steps, "rk4"))
        out[miss, target] = draws[:, 0]
    return out


def chained_gaussian_impute(md: MaskedDataset, sweeps: int, rng: np.random.Generator) -> np.ndarray:
    """Chained linear-Gaussian regressions with posterior parameter draws.

    Each sweep visits every incomplete column, regresses it on all other
    (currently completed) columns over its observed rows, draws the
    coefficients and noise scale from the flat-prior posterior and refills
    the missing cells.
    """
    X = md.X.copy()
    cols = md.missing_columns()
    if not cols:
        return X
    n, d = X.shape
    for j in cols:
        obs = ~md.M[:, j]
        if obs.sum() < MIN_COMPLETE:
            raise TooFewComplete(f"only {int(obs.sum())} observed rows in column {j}")
        # start from observed-mean fills
        X[md.M[:, j], j] = np.mean(X[obs, j])
    for _ in range(max(1, sweeps)):
        for j in cols:
            obs = ~md.M[:, j]
            others = [k for k in range(d) if k != j]
            Z = np.hstack([np.ones((n, 1)), X[:, others]])
            Zo, yo = Z[obs], X[obs, j]
            G = Zo.T @ Zo
            beta_hat = np.linalg.solve(G, Zo.T @ yo)
            resid = yo - Zo @ beta_hat
            dof = max(len(yo) - Z.shape[1], 1)
            s2 = float(resid @ resid) / rng.chisquare(dof)
            L = np.linalg.cholesky(np.linalg.inv(G) * s2)
            beta = beta_hat + L @ rng.standard_normal(Z.shape[1])
            miss = md.M[:, j]
            X[miss, j] = Z[miss] @ beta + math.sqrt(s2) * rng.standard_normal(int(miss.sum()))
    return X


@dataclass
class RubinResult:
    theta: np.ndarray
    V: np.ndarray
    B: np.ndarray
    T: np.ndarray
    K: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.T))


def rubin_combine(estimates: Sequence, variances: Sequence) -> RubinResult:
    """Combine ``K >= 2`` completed-data analyses: ``T = Vbar + (1 + 1/K) B``."""
    est = [np.atleast_1d(np.asarray(e, dtype=float)) for e in estimates]
    K = len(est)
    if K < 2:
        raise TooFewImputations("need at least two imputations")
    p = est[0].size
    E = np.vstack(est)
    Vs = np.stack([np.asarray(v, dtype=float).reshape(p, p) for v in variances])
    if E.shape != (K, p) or Vs.shape[0] != K:
        raise ValueError("inconsistent estimate/variance dimensions")
    theta = E.mean(0)
    D = E - theta
    B = D.T @ D / (K - 1)
    V = Vs.mean(0)
    return RubinResult(theta, V, B, V + (1.0 + 1.0 / K) * B, K)


def ols_analysis(X, y, standardize: bool = True):
    """Complete-data OLS with intercept on (optionally standardized) columns.

    Returns ``(coef, cov)`` with the usual ``s^2 (Z^T Z)^{-1}`` covariance.
    """
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    if standardize:
        X = (X - X.mean(0)) / X.std(0)
    Z = np.hstack([np.ones((X.shape[0], 1)), X])
    G = np.linalg.inv(Z.T @ Z)
    coef = G @ Z.T @ y
    r = y - Z @ coef
    s2 = float(r @ r) / (len(y) - Z.shape[1])
    return coef, s2 * G


def mi_pipeline(md: MaskedDataset, target: int, engine: str, K_imp: int,
                analysis: Callable, rng: np.random.Generator,
                cfg: TrainConfig | None = None, sweeps: int = 5,
                return_imputations: bool = False):
    """Impute ``K_imp`` times, analyse each completed set, combine by Rubin.

    ``analysis(completed) -> (theta, V)``. ``engine`` is ``"flow"`` or
    ``"chained"``; both condition on every other column.
    """
    if K_imp < 2:
        raise TooFewImputations("need at least two imputations")
    if engine == "flow":
        if not md.M.any():
            completed = [md.X.copy() for _ in range(K_imp)]
        else:
            model = fm_imputer_train(md, target, cfg or TrainConfig(), rng)
            completed = [fm_impute(model, md, target, rng) for _ in range(K_imp)]
    elif engine == "chained":
        completed = [chained_gaussian_impute(md, sweeps, rng) for _ in range(K_imp)]
    else:
        raise ValueError(f"unknown engine {engine!r}")
    res = [analysis(c) for c in completed]
    out = rubin_combine([r[0] for r in res], [r[1] for r in res])
    return (out, completed) if return_imputations else out


# ---------------------------------------------------------------- MNAR tilt

def tilt_log_normalizer(ell, eta: float) -> tuple[float, float]:
    """``A(eta) = log mean exp(eta * ell)`` and its derivative (the tilted mean)."""
    ell = np.asarray(ell, dtype=float).ravel()
    if not np.all(np.isfinite(ell)):
        raise ValueError("loss values must be finite")
    z = eta * ell
    A = float(logsumexp(z) - math.log(ell.size))
    w = np.exp(z - logsumexp(z))
    return A, float(np.sum(w * ell))


def tilt_kl(ell, eta: float) -> float:
    A, dA = tilt_log_normalizer(ell, eta)
    return eta * dA - A


@dataclass
class TiltSolution:
    eta: float
    A: float
    kl: float
    iterations: int


def solve_tilt(ell, rho: float, tol: float = 1e-8, max_iter: int = 200) -> TiltSolution:
    """Bisection for ``eta A'(eta) - A(eta) = rho`` on ``[0, 50 / sd(ell)]``.

    Every evaluated point is checked for monotonicity of the KL curve.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    ell = np.asarray(ell, dtype=float).ravel()
    if rho == 0:
        return TiltSolution(0.0, 0.0, 0.0, 0)
    sd = float(np.std(ell))
    if sd == 0.0:
        raise NoSolutionInBracket("constant loss: the tilt cannot move the KL")
    lo, hi = 0.0, 50.0 / sd
    kl_hi = tilt_kl(ell, hi)
    if kl_hi < rho:
        raise NoSolutionInBracket(f"KL at the bracket cap is {kl_hi:.4g} < rho={rho}")
    seen = [(0.0, 0.0), (hi, kl_hi)]
    it = 0
    mid, kl = hi, kl_hi
    while it < max_iter:
        it += 1
        mid = 0.5 * (lo + hi)
        kl = tilt_kl(ell, mid)
        seen.append((mid, kl))
        if abs(kl - rho) < tol:
            break
        if kl < rho:
            lo = mid
        else:
            hi = mid
    seen.sort()
    ks = np.array([k for _, k in seen])
    if np.any(np.diff(ks) < -1e-10):
        raise NoSolutionInBracket("KL curve is not monotone on the bracket")
    A, _ = tilt_log_normalizer(ell, mid)
    return TiltSolution(float(mid), A, float(kl), it)


def tilted_mean(ell, values, eta: float) -> float:
    """Worst-case mean of ``values`` under the tilt ``exp(eta * ell)``."""
    z = eta * np.asarray(ell, dtype=float).ravel()
    w = np.exp(z - logsumexp(z))
    return float(np.sum(w * np.asarray(values, dtype=float).ravel()))
