"""Flow copulas: rank pseudo-observations, unit-cube transforms, dependence.

Data are reduced to pseudo-observations ``(R - 1/2) / n``, clipped to
``[eps, 1 - eps]``, mapped to the real line by logit or probit and modelled
there with a flow. Samples are mapped back to the unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri
from scipy.stats import rankdata

from .cfm import FlowModel, cfm_train
from .errors import OutOfUnitInterval, TooFewRows
from .mlp import TrainConfig
from .ode import OdeConfig


@dataclass
class PseudoObs:
    U: np.ndarray
    eps: float


def ranks_to_pseudo(X, eps: float | None = None) -> PseudoObs:
    """Columnwise average ranks mapped to ``(R - 1/2) / n`` and clipped.

    ``eps`` defaults to ``1 / (2n)``, which leaves every value unchanged.
    """
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    n = X.shape[0]
    if n < 2:
        raise TooFewRows("need at least two rows")
    eps = 1.0 / (2 * n) if eps is None else float(eps)
    R = rankdata(X, method="average", axis=0)
    return PseudoObs(np.clip((R - 0.5) / n, eps, 1.0 - eps), eps)


def _check_unit(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0.0) | ~(u < 1.0)):
        raise OutOfUnitInterval("values must lie strictly inside (0, 1)")
    return u


def logit_map(u) -> np.ndarray:
    return logit(_check_unit(u))


def logit_inverse(z) -> np.ndarray:
    return expit(np.asarray(z, dtype=float))


def probit_map(u) -> np.ndarray:
    return ndtri(_check_unit(u))


def probit_inverse(z) -> np.ndarray:
    return ndtr(np.asarray(z, dtype=float))


TRANSFORMS = {"logit": (logit_map, logit_inverse), "probit": (probit_map, probit_inverse)}


@dataclass
class CopulaModel:
    flow: FlowModel
    transform: str
    eps: float

    def to_unit(self, z) -> np.ndarray:
        u = TRANSFORMS[self.transform][1](z)
        return np.clip(u, self.eps, 1.0 - self.eps)


def flow_copula_train(X, transform: str, cfg: TrainConfig, rng: np.random.Generator,
                      eps: float | None = None, history: list | None = None) -> CopulaModel:
    """Fit a flow to the transformed pseudo-observations of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 100:
        raise TooFewRows("flow copula needs at least 100 rows")
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}")
    po = ranks_to_pseudo(X, eps)
    Z = TRANSFORMS[transform][0](po.U)
    flow = cfm_train(Z, cfg, rng, history=history)
    return CopulaModel(flow, transform, po.eps)


def copula_sample(m: CopulaModel, n: int, rng: np.random.Generator,
                  cfg: OdeConfig = OdeConfig(100, "rk4")) -> np.ndarray:
    if n == 0:
        return np.zeros((0, m.flow.dim))
    return m.to_unit(m.flow.sample(n, rng, cfg=cfg))


def kendall_tau(U, chunk: int = 512) -> float:
    """Concordant minus discordant pairs over all pairs, ties contributing 0."""
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[1] != 2:
        raise ValueError("expected two columns")
    n = U.shape[0]
    if n < 2:
        raise TooFewRows("need at least two rows")
    a, b = U[:, 0], U[:, 1]
    s = 0.0
    for i0 in range(0, n, chunk):
        sl = slice(i0, min(i0 + chunk, n))
        da = np.sign(a[sl, None] - a[None, :])
        db = np.sign(b[sl, None] - b[None, :])
        s += float(np.sum(da * db))
    return s / (n * (n - 1))


def ks_uniform(u) -> float:
    """Kolmogorov-Smirnov distance of a sample to U(0, 1)."""
    u = np.sort(np.asarray(u, dtype=float).ravel())
    n = u.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - u), np.max(u - (i - 1) / n)))


def conditional_corr(U, lo: float, hi: float) -> float:
    """Pearson correlation of the rows with ``lo <= u1 < hi``."""
    U = np.asarray(U, dtype=float)
    sel = (U[:, 0] >= lo) & (U[:, 0] < hi)
    return float(np.corrcoef(U[sel, 0], U[sel, 1])[0, 1])


def field_grid(m: CopulaModel, t: float = 0.5, size: int = 15, lim: float = 3.0) -> np.ndarray:
    """Velocity of the z-space flow on a square grid: columns z1, z2, v1, v2."""
    g = np.linspace(-lim, lim, size)
    Z1, Z2 = np.meshgrid(g, g)
    Z = np.column_stack([Z1.ravel(), Z2.ravel()])
    return np.hstack([Z, m.flow.velocity(t, Z)])
