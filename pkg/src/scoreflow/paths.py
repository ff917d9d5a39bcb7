"""Linear probability paths and minibatch couplings.

A coupling decides which base draw ``x0`` is paired with which data point
``x1`` inside a minibatch. Exact assignment uses a shortest augmenting path
solver; the entropic variant runs Sinkhorn in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonConvergence, NotSquare


@dataclass
class PathSample:
    t: float | np.ndarray
    x_t: np.ndarray
    u: np.ndarray
    x0: np.ndarray
    x1: np.ndarray


def linear_path(x0, x1, t, noise: float = 0.0, xi=None) -> PathSample:
    """Point ``(1-t) x0 + t x1`` on the straight line and its velocity ``x1 - x0``.

    Works on single vectors or on row batches with one ``t`` per row. With
    ``noise > 0`` the point is jittered by ``noise * sqrt(t(1-t)) * xi``; the
    regression target stays ``x1 - x0``.
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise DimensionMismatch(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    tt = t_arr[..., None] if (x0.ndim == 2 and t_arr.ndim == 1) else t_arr
    xt = (1.0 - tt) * x0 + tt * x1
    if noise:
        if xi is None:
            raise ValueError("noise requires xi")
        xt = xt + noise * np.sqrt(tt * (1.0 - tt)) * xi
    return PathSample(t, xt, x1 - x0, x0, x1)


def conditional_target(x_t, x1, t):
    """Velocity ``(x1 - x_t) / (1 - t)`` written with the endpoint only (t < 1)."""
    t = np.asarray(t, dtype=float)
    tt = t[..., None] if (np.ndim(x_t) == 2 and t.ndim == 1) else t
    return (np.asarray(x1) - np.asarray(x_t)) / (1.0 - tt)


@dataclass
class CouplingPlan:
    kind: str
    permutation: np.ndarray | None = None
    plan: np.ndarray | None = None

    def cost(self, C) -> float:
        C = np.asarray(C, dtype=float)
        if self.permutation is not None:
            return float(C[np.arange(C.shape[0]), self.permutation].sum())
        if self.plan is not None:
            return float(np.sum(self.plan * C))
        return float(C.mean())


def squared_cost(x0, x1) -> np.ndarray:
    """``C[i, j] = ||x0[j] - x1[i]||^2`` (rows index data, columns index base)."""
    x0 = np.asarray(x0, dtype=float).reshape(len(x0), -1)
    x1 = np.asarray(x1, dtype=float).reshape(len(x1), -1)
    d = x1[:, None, :] - x0[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def ot_assignment(C) -> CouplingPlan:
    """Exact minimum-cost permutation via shortest augmenting paths.

    Returns ``sigma`` with row ``i`` matched to column ``sigma[i]``. Runs in
    ``O(m^3)`` with the inner column scan vectorized.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise NotSquare(f"cost matrix must be square, got {C.shape}")
    m = C.shape[0]
    if m == 0:
        return CouplingPlan("assignment", np.zeros(0, dtype=int))
    u = np.zeros(m + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)    # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    sigma = np.empty(m, dtype=int)
    sigma[p[1:] - 1] = np.arange(m)
    return CouplingPlan("assignment", sigma)


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    mx = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(a - mx), axis=axis))


def sinkhorn(C, eps: float, iters: int = 10_000, tol: float = 1e-10) -> CouplingPlan:
    """Entropic OT plan with uniform marginals ``1/m``, computed in log space.

    Raises NonConvergence if the row-marginal violation still exceeds 1e-6
    after ``iters`` sweeps; otherwise the plan is rounded onto the exact
    marginals, which moves it by at most twice the remaining violation.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise NotSquare(f"cost matrix must be square, got {C.shape}")
    m = C.shape[0]
    loga = -np.log(m)
    f = np.zeros(m)
    g = np.zeros(m)
    viol = np.inf
    for it in range(iters):
        f = eps * (loga - _lse((g[None, :] - C) / eps, axis=1))
        g = eps * (loga - _lse((f[:, None] - C) / eps, axis=0))
        # columns are exact after the g update; rows are checked every few sweeps
        if it % 10 == 9 or it == iters - 1:
            logP = (f[:, None] + g[None, :] - C) / eps
            viol = float(np.max(np.abs(np.exp(_lse(logP, axis=1)) - 1.0 / m)))
            if viol < tol:
                break
    if viol > 1e-6:
        raise NonConvergence(f"marginal violation {viol:.2e} after {iters} iterations")
    return CouplingPlan("entropic", plan=_round_to_marginals(np.exp((f[:, None] + g[None, :] - C) / eps)))


def _round_to_marginals(P: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto exact uniform marginals.

    Rows and columns are first scaled down where they exceed ``1/m``; the
    remaining deficits are filled by a rank-one nonnegative correction.
    """
    m = P.shape[0]
    a = 1.0 / m
    P = P * np.minimum(a / P.sum(axis=1), 1.0)[:, None]
    P = P * np.minimum(a / P.sum(axis=0), 1.0)[None, :]
    er = a - P.sum(axis=1)
    ec = a - P.sum(axis=0)
    tot = er.sum()
    if tot > 0:
        P = P + np.outer(er, ec) / tot
    return P


def pair_minibatch(x0, x1, kind: str, rng: np.random.Generator,
                   eps: float = 0.05) -> np.ndarray:
    """Reorder base draws so that row ``i`` of the result is paired with ``x1[i]``.

    ``kind`` is ``"independent"`` (keep the random order), ``"assignment"``
    (exact OT permutation) or ``"entropic"`` (rows drawn from the Sinkhorn plan,
    with ``eps`` scaled by the mean cost).
    """
    if kind == "independent":
        return x0
    C = squared_cost(x0, x1)
    if kind == "assignment":
        return x0[ot_assignment(C).permutation]
    if kind == "entropic":
        P = sinkhorn(C, eps * max(float(C.mean()), 1e-12)).plan
        P = P / P.sum(axis=1, keepdims=True)
        cdf = np.cumsum(P, axis=1)
        r = rng.random((len(x1), 1))
        j = np.minimum((cdf < r).sum(axis=1), len(x0) - 1)
        return x0[j]
    raise ValueError(f"unknown coupling {kind!r}")


def teacher_signal(data, kind: str, rng: np.random.Generator, batch: int = 64,
                   n_batches: int = 200, t_max: float = 1.0 - 1e-3, eps: float = 0.05):
    """Draw ``(t, x_t, u)`` triples the way CFM training would see them."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    ts, xs, us = [], [], []
    for _ in range(n_batches):
        x1 = data[rng.integers(0, len(data), size=batch)]
        x0 = pair_minibatch(rng.standard_normal(x1.shape), x1, kind, rng, eps=eps)
        t = rng.uniform(0.0, t_max, size=batch)
        ps = linear_path(x0, x1, t)
        ts.append(t)
        xs.append(ps.x_t)
        us.append(ps.u)
    return np.concatenate(ts), np.concatenate(xs), np.concatenate(us)


def binned_variance(t, x, u, t_edges, x_edges, min_count: int = 20) -> np.ndarray:
    """Variance of the 1-D teacher signal ``u`` in each occupied (t, x) bin.

    Bins with fewer than ``min_count`` points are reported as NaN.
    """
    x = np.asarray(x).reshape(len(t), -1)[:, 0]
    u = np.asarray(u).reshape(len(t), -1)[:, 0]
    ti = np.digitize(t, t_edges) - 1
    xi = np.digitize(x, x_edges) - 1
    nt, nx = len(t_edges) - 1, len(x_edges) - 1
    out = np.full((nt, nx), np.nan)
    ok = (ti >= 0) & (ti < nt) & (xi >= 0) & (xi < nx)
    flat = ti[ok] * nx + xi[ok]
    cnt = np.bincount(flat, minlength=nt * nx)
    s1 = np.bincount(flat, weights=u[ok], minlength=nt * nx)
    s2 = np.bincount(flat, weights=u[ok] ** 2, minlength=nt * nx)
    with np.errstate(invalid="ignore", divide="ignore"):
        var = (s2 - s1 * s1 / cnt) / (cnt - 1)
    var[cnt < min_count] = np.nan
    return var.reshape(nt, nx)
