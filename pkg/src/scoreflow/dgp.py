"""Data-generating processes for the demos and acceptance experiments.

Each generator documents its formula; where a quantity has a closed form
(ATE, standardized coefficients, missingness intercept) it is exposed too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit


# ---------------------------------------------------------------- flows

def two_cluster_1d(n: int, rng: np.random.Generator, centre: float = 2.0, sd: float = 0.3):
    """Equal mixture of N(-centre, sd^2) and N(centre, sd^2)."""
    s = np.where(rng.random(n) < 0.5, -centre, centre)
    return s + sd * rng.standard_normal(n)


def outlier_2d(n: int, rng: np.random.Generator, frac: float = 0.05, radius: float = 8.0):
    """Standard bivariate normal with a fraction of points on a distant ring."""
    X = rng.standard_normal((n, 2))
    k = int(round(frac * n))
    ang = rng.uniform(0, 2 * math.pi, size=k)
    X[:k] = radius * np.column_stack([np.cos(ang), np.sin(ang)]) + 0.1 * rng.standard_normal((k, 2))
    return X[rng.permutation(n)]


def copula_sign_switch(n: int, rng: np.random.Generator, noise: float = 0.5):
    """``x2 = x1^2 + noise * xi``: local correlation negative for small x1, positive for large."""
    x1 = rng.standard_normal(n)
    return np.column_stack([x1, x1 ** 2 + noise * rng.standard_normal(n)])


def gaussian_pair(n: int, rho: float, rng: np.random.Generator):
    L = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    return rng.standard_normal((n, 2)) @ L.T


# ---------------------------------------------------------------- multiple imputation

MI_BETA_STD = (0.4971, 0.7892, 1.4505)
MI_MODE_SHIFT = 1.6
MI_MODE_SD = 0.45
MI_X1_LOAD = 0.3
MI_MASK_W = (0.8, -0.6)
MI_RATE = 0.359


def mi_x3_sd() -> float:
    # Var(0.3 X1) + Var(1.6 (2B - 1)) + 0.45^2 with P(B=1) = 1/2 by symmetry
    return math.sqrt(MI_X1_LOAD ** 2 + MI_MODE_SHIFT ** 2 + MI_MODE_SD ** 2)


def mi_mask_intercept(rate: float = MI_RATE, w=MI_MASK_W) -> float:
    """Intercept ``w0`` with ``E logistic(w0 + w1 X1 + w2 X2) = rate``."""
    s = math.hypot(*w)
    z, wts = np.polynomial.hermite_e.hermegauss(80)
    wts = wts / wts.sum()
    return brentq(lambda w0: float(np.sum(wts * expit(w0 + s * z))) - rate, -10, 10)


@dataclass
class MiData:
    X: np.ndarray        # columns X1, X2, X3, Y
    mode: np.ndarray     # +1 / -1 component of X3


def mi_bimodal(n: int, rng: np.random.Generator) -> MiData:
    """Two-mode conditional for X3 and a linear outcome.

    X1, X2 ~ N(0, 1); B ~ Bernoulli(logistic(1.2 X2));
    X3 = 0.3 X1 + 1.6 (2B - 1) + 0.45 xi;
    Y = 0.4971 X1 + 0.7892 X2 + (1.4505 / sd(X3)) X3 + N(0, 1),
    so the coefficients on standardized covariates are (0.4971, 0.7892, 1.4505)
    and the intercept is 0.
    """
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    b = rng.random(n) < expit(1.2 * x2)
    sgn = np.where(b, 1.0, -1.0)
    x3 = MI_X1_LOAD * x1 + MI_MODE_SHIFT * sgn + MI_MODE_SD * rng.standard_normal(n)
    y = (MI_BETA_STD[0] * x1 + MI_BETA_STD[1] * x2 + MI_BETA_STD[2] / mi_x3_sd() * x3
         + rng.standard_normal(n))
    return MiData(np.column_stack([x1, x2, x3, y]), sgn)


def mi_mode_fractions(x1, x3, gap: float = 0.8) -> tuple[float, float]:
    """Share of values clearly in the lower and the upper mode of X3 given X1."""
    c = np.asarray(x3) - MI_X1_LOAD * np.asarray(x1)
    return float(np.mean(c < -gap)), float(np.mean(c > gap))


# ---------------------------------------------------------------- causal

CAUSAL_D = 10
KAPPA = 1.6
TAU0 = 0.958            # E[tau(X)] = 0.958 + 0.4 = 1.358
CAUSAL_ATE = TAU0 + 0.4


def _sig(u):
    return expit(u)


def causal_f(X):
    return (1.0 * np.sin(1.2 * X[:, 0]) + 0.6 * (X[:, 1] ** 2 - 1.0) + 0.5 * X[:, 2] * X[:, 3]
            + 0.3 * np.cos(X[:, 4] * X[:, 5]) - 0.2 * X[:, 6] + 0.15 * np.sin(X[:, 7] + X[:, 8]))


def causal_tau(X):
    # E sin(X1) = 0 and E X2^2 = 1
    return TAU0 + 0.5 * np.sin(X[:, 0]) + 0.4 * X[:, 1] ** 2


def causal_scale(X, a):
    return ((0.7 + 0.25 * _sig(0.9 * X[:, 1] - 0.6 * X[:, 2]) + 0.15 * np.abs(X[:, 3]))
            * np.exp(0.25 * KAPPA * a))


def causal_mix_prob(X, a):
    return _sig(0.9 * X[:, 0] - 0.7 * X[:, 1] + 0.3 * np.sin(X[:, 2]) + 1.4 * KAPPA * a)


def causal_propensity(X):
    # squeezed into [0.1, 0.9] so overlap holds by construction
    return 0.1 + 0.8 * _sig(0.5 * X[:, 0] - 0.4 * X[:, 1] + 0.3 * X[:, 4])


def causal_potential(X, a, rng: np.random.Generator):
    """Draw ``Y(a)`` for every row of ``X`` with fresh noise.

    ``Y(a) = f(X) + tau(X) a + s(X, a) eps`` where ``eps`` mixes a Gaussian
    with a centred exponential whose weight depends on ``(X, a)``, so the
    standardized residual law differs between arms.
    """
    n = X.shape[0]
    a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
    Z = rng.random(n) < causal_mix_prob(X, a)
    U = rng.exponential(size=n) - 1.0
    eps = 0.75 * rng.standard_normal(n) + (0.15 + 0.9 * Z) * U
    return causal_f(X) + causal_tau(X) * a + causal_scale(X, a) * eps


@dataclass
class CausalData:
    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray


def causal_observational(n: int, rng: np.random.Generator) -> CausalData:
    X = rng.standard_normal((n, CAUSAL_D))
    A = (rng.random(n) < causal_propensity(X)).astype(int)
    Y = causal_potential(X, A, rng)
    return CausalData(X, A, Y)


def causal_interventional(n: int, a: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from ``p(y | do(A = a))``."""
    X = rng.standard_normal((n, CAUSAL_D))
    return causal_potential(X, a, rng)


# ---------------------------------------------------------------- ATE designs

def randomized_design(n: int, rng: np.random.Generator, tau: float = 1.0, p: int = 3):
    """A ~ Bernoulli(1/2) independent of X; Y = X gamma + tau A + N(0, 1)."""
    X = rng.standard_normal((n, p))
    A = (rng.random(n) < 0.5).astype(int)
    gamma = np.linspace(1.0, -0.5, p)
    Y = X @ gamma + tau * A + rng.standard_normal(n)
    return CausalData(X, A, Y)


def confounded_design(n: int, rng: np.random.Generator):
    """Confounded design with known nuisances (ATE = 1).

    e(x) = logistic(0.5 x1 - 0.4 x2); mu0(x) = x1 + 0.5 x2^2;
    mu1(x) = mu0(x) + 1 + 0.5 x1.
    """
    X = rng.standard_normal((n, 2))
    A = (rng.random(n) < confounded_e(X)).astype(int)
    Y = np.where(A == 1, confounded_mu1(X), confounded_mu0(X)) + rng.standard_normal(n)
    return CausalData(X, A, Y)


def confounded_e(X):
    return expit(0.5 * X[:, 0] - 0.4 * X[:, 1])


def confounded_mu0(X):
    return X[:, 0] + 0.5 * X[:, 1] ** 2


def confounded_mu1(X):
    return confounded_mu0(X) + 1.0 + 0.5 * X[:, 0]
