import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from scoreflow.errors import DimensionMismatch, NotPositiveDefinite, Overflow
from scoreflow.numerics import (cholesky, logdet_spd, matrix_exp, op_norm_sym, rng_stream,
                                solve_spd, stratified_normal)


def _random_spd(d, seed):
    g = np.random.default_rng(seed)
    B = g.standard_normal((d, d))
    return B @ B.T + d * np.eye(d)


# ---------------------------------------------------------------- cholesky

def test_cholesky_identity():
    assert_array_equal(cholesky(np.eye(3)).lower, np.eye(3))


def test_cholesky_2x2_frozen_factor():
    # hand factorization: L = [[2, 0], [1, sqrt(2)]]
    L = cholesky([[4.0, 2.0], [2.0, 3.0]]).lower
    assert_allclose(L, [[2.0, 0.0], [1.0, 1.4142135623730951]], rtol=0, atol=1e-15)
    assert np.linalg.norm(L @ L.T - [[4, 2], [2, 3]]) < 1e-12


def test_cholesky_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


def test_cholesky_pivot_tolerance():
    # rank-one plus a pivot far below 1e-12 * max diag
    a = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]])
    with pytest.raises(NotPositiveDefinite):
        cholesky(a)


def test_cholesky_rejects_asymmetric_and_nonsquare():
    with pytest.raises(NotPositiveDefinite):
        cholesky([[2.0, 1.0], [0.0, 2.0]])
    with pytest.raises(DimensionMismatch):
        cholesky(np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_cholesky_reconstructs(d, seed):
    a = _random_spd(d, seed)
    f = cholesky(a)
    assert np.all(np.diag(f.lower) > 0)
    assert_array_equal(np.triu(f.lower, 1), 0.0)
    assert np.linalg.norm(f.reconstruct() - a) <= 1e-10 * np.linalg.norm(a)


# ---------------------------------------------------------------- solves and logdet

def test_solve_trivial_cases():
    assert_allclose(solve_spd(cholesky(np.eye(2)), [1.0, 2.0]), [1.0, 2.0])
    assert_allclose(solve_spd(cholesky(np.diag([4.0, 9.0])), [8.0, 27.0]), [2.0, 3.0])


def test_solve_random_residual():
    a = _random_spd(5, 3)
    b = np.arange(1.0, 6.0)
    x = solve_spd(cholesky(a), b)
    assert np.linalg.norm(a @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_solve_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        solve_spd(cholesky(np.eye(3)), np.ones(2))


def test_logdet_trivial():
    assert logdet_spd(cholesky(np.eye(4))) == 0.0
    assert_allclose(logdet_spd(cholesky(np.diag([4.0, 9.0]))), math.log(36.0), rtol=1e-14)


def test_logdet_matches_deflation_eigenvalues():
    a = np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]])
    # oracle: power iteration with Hotelling deflation, eigenvalue product
    lam, m = [], a.copy()
    for _ in range(3):
        v = np.ones(3)
        for _ in range(5000):
            v = m @ v
            v /= np.linalg.norm(v)
        ev = v @ m @ v
        lam.append(ev)
        m = m - ev * np.outer(v, v)
    # frozen: product of eigenvalues = det(a) = 21.29 by cofactor expansion
    assert_allclose(np.prod(lam), 21.29, rtol=1e-9)
    assert_allclose(logdet_spd(cholesky(a)), math.log(21.29), rtol=1e-12)


# ---------------------------------------------------------------- matrix exponential

def test_expm_zero_and_diagonal():
    assert_array_equal(matrix_exp(np.zeros((3, 3))), np.eye(3))
    assert_allclose(matrix_exp(np.diag([1.0, 2.0])), np.diag([math.e, math.e ** 2]), rtol=1e-13)


def test_expm_rotation_against_series_oracle():
    theta = 1.3
    A = np.array([[0.0, -1.0], [1.0, 0.0]])
    # oracle: plain Taylor series to order 30 with no scaling
    term, S = np.eye(2), np.eye(2)
    for k in range(1, 31):
        term = term @ (theta * A) / k
        S = S + term
    assert_allclose(S, [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]],
                    atol=1e-14)
    assert_allclose(matrix_exp(A, theta), S, atol=1e-13)


def test_expm_large_norm_relative_error():
    g = np.random.default_rng(0)
    A = g.standard_normal((4, 4))
    A *= 10.0 / np.max(np.sum(np.abs(A), axis=1))
    from scipy.linalg import expm  # independent oracle
    ref = expm(A)
    assert np.linalg.norm(matrix_exp(A) - ref) <= 1e-10 * np.linalg.norm(ref)


def test_expm_overflow():
    with pytest.raises(Overflow):
        matrix_exp(np.array([[1000.0]]))


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.integers(0, 1000))
def test_expm_semigroup(s, t, seed):
    A = np.random.default_rng(seed).standard_normal((3, 3))
    lhs = matrix_exp(A, s + t)
    rhs = matrix_exp(A, s) @ matrix_exp(A, t)
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * max(1.0, np.max(np.abs(lhs)))


# ---------------------------------------------------------------- operator norm

def test_opnorm_trivial():
    assert_allclose(op_norm_sym(np.eye(3)), 1.0, rtol=1e-12)
    assert_allclose(op_norm_sym(np.diag([3.0, -5.0])), 5.0, rtol=1e-12)


def test_opnorm_characteristic_polynomial_oracle():
    a = np.array([[2.0, 1.0, 0.0, 0.5], [1.0, -3.0, 0.3, 0.0],
                  [0.0, 0.3, 1.0, 0.2], [0.5, 0.0, 0.2, -0.5]])
    roots = np.roots(np.poly(a))
    # frozen from the root-finding oracle
    assert_allclose(np.max(np.abs(roots)), 3.217553390519719, rtol=1e-10)
    assert_allclose(op_norm_sym(a), 3.217553390519719, rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_opnorm_dominates_diagonal(d, seed):
    B = np.random.default_rng(seed).standard_normal((d, d))
    a = B + B.T
    assert op_norm_sym(a) >= np.max(np.abs(np.diag(a))) - 1e-10


# ---------------------------------------------------------------- random streams

def test_rng_reproducible_and_distinct():
    a = rng_stream(7, 3).standard_normal(1000)
    b = rng_stream(7, 3).standard_normal(1000)
    assert_array_equal(a, b)
    assert not np.array_equal(a, rng_stream(7, 4).standard_normal(1000))


def test_rng_streams_uncorrelated():
    xs = [rng_stream(11, s).standard_normal(100_000) for s in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert abs(np.corrcoef(xs[i], xs[j])[0, 1]) < 0.01


def test_stratified_normal_moments():
    z = stratified_normal(100_000, rng_stream(0))
    assert abs(z.mean()) < 1e-3
    assert abs(z.var() - 1.0) < 1e-3
