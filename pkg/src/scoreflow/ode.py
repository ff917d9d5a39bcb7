"""Fixed-grid ODE/SDE integration and the linear-system closed forms.

Fields are callables ``v(t, X)`` acting on row batches ``X`` of shape
``(n, d)``. The linear drift ``v(t, x) = A x`` has closed-form flow maps and
Gaussian moments, which the tests use as oracles for the integrators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonFinite, NotPositiveDefinite
from .numerics import cholesky, matrix_exp


@dataclass(frozen=True)
class OdeConfig:
    steps: int = 100
    scheme: str = "rk4"
    direction: str = "forward"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scheme not in ("euler", "rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.direction not in ("forward", "reverse"):
            raise ValueError(f"unknown direction {self.direction!r}")


def _grid(cfg: OdeConfig) -> tuple[np.ndarray, float]:
    ts = np.arange(cfg.steps + 1) / cfg.steps
    if cfg.direction == "reverse":
        return ts[::-1], -1.0 / cfg.steps
    return ts, 1.0 / cfg.steps


def _step(field: Callable, t: float, x: np.ndarray, h: float, scheme: str) -> np.ndarray:
    if scheme == "euler":
        return x + h * field(t, x)
    k1 = field(t, x)
    k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = field(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def ode_integrate(field: Callable, x0, cfg: OdeConfig = OdeConfig(),
                  trajectory: bool = False):
    """Integrate ``dx/dt = field(t, x)`` on the grid ``t_k = k / K``.

    Reverse direction walks the same grid from 1 back to 0. Accepts a single
    vector or a row batch. With ``trajectory=True`` returns ``(ts, states)``.
    """
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    ts, h = _grid(cfg)
    states = [x] if trajectory else None
    for k in range(cfg.steps):
        x = _step(field, float(ts[k]), x, h, cfg.scheme)
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"state became non-finite at t={ts[k + 1]:.4f}")
        if trajectory:
            states.append(x)
    if trajectory:
        arr = np.stack(states)
        return ts, (arr[:, 0] if single else arr)
    return x[0] if single else x


def linear_field(A) -> Callable:
    A = np.asarray(A, dtype=float)
    return lambda t, X: X @ A.T


def logdensity_along_flow(field: Callable, x0, logrho0, cfg: OdeConfig = OdeConfig(),
                          divergence: str | Callable = "exact-linear", matrix=None,
                          probes: int = 1, rng: np.random.Generator | None = None,
                          h: float = 1e-5):
    """Transport a log density along the flow: ``d log rho / dt = -div v``.

    ``divergence`` selects how ``div v`` is obtained:

    * ``"exact-linear"`` -- ``tr(matrix)`` for a linear field ``v = matrix @ x``;
    * ``"finite-difference"`` -- full trace of a central-difference Jacobian;
    * ``"hutchinson"`` -- Rademacher probes fixed along the trajectory;
    * a callable ``div(t, X) -> (n,)``.

    The state and the log density are advanced together with the same scheme.
    Returns ``(x1, logrho1)``.
    """
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    n, d = x.shape
    logr = np.broadcast_to(np.asarray(logrho0, dtype=float), (n,)).copy()

    if callable(divergence):
        div = divergence
    elif divergence == "exact-linear":
        if matrix is None:
            raise ValueError("exact-linear divergence needs the field matrix")
        tr = float(np.trace(np.asarray(matrix, dtype=float)))
        div = lambda t, X: np.full(X.shape[0], tr)  # noqa: E731
    elif divergence == "finite-difference":
        def div(t, X):
            out = np.zeros(X.shape[0])
            for j in range(d):
                e = np.zeros(d)
                e[j] = h
                out += (field(t, X + e)[:, j] - field(t, X - e)[:, j]) / (2 * h)
            return out
    elif divergence == "hutchinson":
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = rng.integers(0, 2, size=(probes, n, d)) * 2.0 - 1.0

        def div(t, X):
            acc = np.zeros(X.shape[0])
            for e in eps:
                jvp = (field(t, X + h * e) - field(t, X - h * e)) / (2 * h)
                acc += np.sum(e * jvp, axis=1)
            return acc / probes
    else:
        raise ValueError(f"unknown divergence mode {divergence!r}")

    def aug(t, Z):
        X = Z[:, :d]
        return np.concatenate([field(t, X), -div(t, X)[:, None]], axis=1)

    z = ode_integrate(aug, np.concatenate([x, logr[:, None]], axis=1), cfg)
    x1, l1 = z[:, :d], z[:, d]
    return (x1[0], float(l1[0])) if single else (x1, l1)


def gaussian_pushforward(A, mu0, sigma0, t: float):
    """Moments of ``exp(tA) X`` for ``X ~ N(mu0, sigma0)``."""
    sigma0 = np.atleast_2d(np.asarray(sigma0, dtype=float))
    try:
        cholesky(sigma0)
    except NotPositiveDefinite:
        raise NotPositiveDefinite("initial covariance must be SPD") from None
    E = matrix_exp(np.atleast_2d(A), t)
    mu = E @ np.atleast_1d(np.asarray(mu0, dtype=float))
    return mu, E @ sigma0 @ E.T


def ou_moments(A, D, mu0, sigma0, t: float, steps: int = 200):
    """RK4 solution of ``mu' = A mu`` and ``Sigma' = A Sigma + Sigma A^T + D``.

    This is the moment flow of ``dX = A X dt + D^{1/2} dW``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if np.max(np.abs(D - D.T), initial=0.0) > 1e-12 or np.linalg.eigvalsh(D)[0] < -1e-12:
        raise ValueError("D must be symmetric PSD")
    mu = np.atleast_1d(np.asarray(mu0, dtype=float)).copy()
    S = np.atleast_2d(np.asarray(sigma0, dtype=float)).copy()
    d = mu.size
    if steps < 1:
        raise ValueError("steps must be >= 1")

    def rhs(_t, z):
        m, s = z[:d], z[d:].reshape(d, d)
        return np.concatenate([A @ m, (A @ s + s @ A.T + D).ravel()])

    z = np.concatenate([mu, S.ravel()])
    h = t / steps
    for k in range(steps):
        tk = k * h
        k1 = rhs(tk, z)
        k2 = rhs(tk + h / 2, z + h / 2 * k1)
        k3 = rhs(tk + h / 2, z + h / 2 * k2)
        k4 = rhs(tk + h, z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return z[:d], z[d:].reshape(d, d)


def euler_maruyama(f: Callable, g, x0, steps: int, rng: np.random.Generator,
                   t_end: float = 1.0, trajectory: bool = False):
    """Simulate ``dX = f(t, X) dt + g(t) dW`` with step ``t_end / steps``.

    ``g`` is a scalar or a callable of ``t``. Accepts a single state or a
    batch of independent paths.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    gfun = g if callable(g) else (lambda _t, c=float(g): c)
    dt = t_end / steps
    sq = math.sqrt(dt)
    states = [x] if trajectory else None
    for k in range(steps):
        t = k * dt
        x = x + f(t, x) * dt + gfun(t) * sq * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"path became non-finite at t={t + dt:.4f}")
        if trajectory:
            states.append(x)
    if trajectory:
        arr = np.stack(states)
        return arr[:, 0] if single else arr
    return x[0] if single else x


def probability_flow_velocity(f: Callable, g, score: Callable) -> Callable:
    """Deterministic field ``f - g^2/2 * score`` sharing the SDE's marginals."""
    gfun = g if callable(g) else (lambda _t, c=float(g): c)

    def v(t, X):
        return f(t, X) - 0.5 * gfun(t) ** 2 * score(t, X)

    return v


def sensitivity_ratio(field: Callable, x0, delta: float, cfg: OdeConfig, probes: int,
                      rng: np.random.Generator) -> float | np.ndarray:
    """Largest ``||dX1|| / ||dX0||`` over random unit perturbations of size ``delta``.

    For a batch of starting points the ratio is returned per point.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    x = np.asarray(x0, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    n, d = x.shape
    dirs = rng.standard_normal((probes, n, d))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    starts = np.concatenate([x[None], x[None] + delta * dirs]).reshape(-1, d)
    ends = ode_integrate(field, starts, cfg).reshape(probes + 1, n, d)
    ratios = np.linalg.norm(ends[1:] - ends[0][None], axis=2) / delta
    out = ratios.max(axis=0)
    return float(out[0]) if single else out
