"""Dense linear algebra, matrix functions and seeded random streams."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NotPositiveDefinite, Overflow

PIVOT_RTOL = 1e-12
SYM_TOL = 1e-12


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Return an independent generator for ``(seed, stream)``.

    Streams are derived through :class:`numpy.random.SeedSequence` spawn keys,
    so distinct stream ids never overlap and equal pairs reproduce bitwise.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(stream) & 0xFFFFFFFFFFFFFFFF,))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return rng_stream(0)
    return rng_stream(int(rng))


@dataclass(frozen=True)
class SpdFactor:
    """Lower-triangular Cholesky factor ``L`` with ``L @ L.T == a``."""

    lower: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _check_square(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    return a


def cholesky(a) -> SpdFactor:
    """Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefinite when any pivot ``L_ii**2`` falls at or below
    ``1e-12 * max(diag(a))``.
    """
    a = _check_square(a)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    maxdiag = float(np.max(np.diag(a), initial=0.0))
    if maxdiag <= 0.0:
        raise NotPositiveDefinite("non-positive diagonal")
    try:
        lower = np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.diag(lower) ** 2
    if np.any(pivots <= PIVOT_RTOL * maxdiag):
        raise NotPositiveDefinite("pivot below tolerance")
    return SpdFactor(lower)


def solve_spd(f: SpdFactor, b) -> np.ndarray:
    """Solve ``a x = b`` given the Cholesky factor of ``a``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.dim:
        raise DimensionMismatch(f"factor is {f.dim}x{f.dim}, rhs has {b.shape[0]} rows")
    from scipy.linalg import solve_triangular

    y = solve_triangular(f.lower, b, lower=True)
    return solve_triangular(f.lower.T, y, lower=False)


def logdet_spd(f: SpdFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(f.lower))))


def matrix_exp(a, t: float = 1.0, order: int = 12) -> np.ndarray:
    """``exp(t a)`` by scaling and squaring with a truncated Taylor series.

    The argument is halved until its infinity norm is at most 0.5, the series
    is summed to ``order`` terms by Horner's rule, then squared back.
    """
    a = _check_square(a)
    m = t * a
    n = m.shape[0]
    norm = float(np.max(np.sum(np.abs(m), axis=1), initial=0.0))
    if not math.isfinite(norm):
        raise Overflow("non-finite input to matrix_exp")
    squarings = max(0, math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0
    b = m / (2.0 ** squarings)
    eye = np.eye(n)
    out = eye.copy()
    for k in range(order, 0, -1):
        out = eye + (b @ out) / k
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(squarings):
            out = out @ out
    if not np.all(np.isfinite(out)):
        raise Overflow("matrix exponential overflowed")
    return out


def op_norm_sym(a, tol: float = 1e-13, max_iter: int = 20000) -> float:
    """Largest absolute eigenvalue of a symmetric matrix by power iteration.

    Iterates on ``a @ a`` implicitly, so eigenvalues of equal magnitude and
    opposite sign do not stall the estimate. Raises NoConvergence when the
    iteration cap is hit; callers usually fall back to the Frobenius norm.
    """
    a = _check_square(a)
    n = a.shape[0]
    if n == 0 or not np.any(a):
        return 0.0
    v = np.random.default_rng(12345).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = a @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = math.sqrt(nw)
        v = w / nw
        if abs(new - est) <= tol * new:
            return new
        est = new
    raise NoConvergence("power iteration did not converge")


def stratified_normal(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` standard normal draws with one uniform draw per probability stratum.

    Each value is ``Phi^{-1}((i + U_i) / n)``; the sample is unbiased for any
    expectation and has far smaller variance than i.i.d. draws in 1-D.
    """
    from scipy.special import ndtri

    u = (np.arange(n) + rng.random(n)) / n
    return ndtri(u)[rng.permutation(n)]
