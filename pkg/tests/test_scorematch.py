import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from scoreflow.errors import DimensionMismatch, DimensionTooSmall, EmptySample, SingularSystem
from scoreflow.mlp import TrainConfig, forward
from scoreflow.scorematch import (GgmProblem, QuarticTheta, dsm_fit, dsm_loss, ggm_benchmark,
                                  ggm_sm_objective, ggm_sm_prox_fit, glasso_fit, glasso_objective,
                                  hutchinson_divergence, james_stein_risk, quartic_normal_equations,
                                  quartic_score, quartic_sm_fit, quartic_sm_objective,
                                  random_sparse_precision, sample_covariance, stein_residual)


def _spd(d, seed):
    g = np.random.default_rng(seed)
    X = g.standard_normal((5 * d, d))
    return sample_covariance(X)


# ---------------------------------------------------------------- quartic model

def test_quartic_score_values():
    assert quartic_score((0, 0, 0), 3.7) == 0.0
    assert quartic_score((0, 2, -0.5), 1.0) == 2.0
    assert quartic_score((1, 1, 1), 2.0) == 37.0


def test_quartic_objective_values():
    assert quartic_sm_objective((0, 2, -0.5), [0.0]) == 4.0
    assert quartic_sm_objective((0, 0, 0), [1.0, -3.0]) == 0.0
    assert quartic_sm_objective((1, 0, 0), [0.0, 2.0]) == 0.5
    with pytest.raises(EmptySample):
        quartic_sm_objective((1, 0, 0), [])


def test_quartic_fit_gaussian():
    x = np.random.default_rng(0).standard_normal(50_000)
    th = quartic_sm_fit(x)
    assert isinstance(th, QuarticTheta)
    assert abs(th.t1) < 0.05 and abs(th.t3) < 0.05
    assert abs(th.t2 + 0.5) < 0.05


def test_quartic_fit_singular():
    with pytest.raises(SingularSystem):
        quartic_sm_fit([1.0, 1.0, 1.0])
    with pytest.raises(EmptySample):
        quartic_sm_fit([])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_quartic_fit_normal_equations_and_lattice(seed):
    g = np.random.default_rng(seed)
    x = np.concatenate([g.standard_normal(150), 0.5 * g.standard_normal(50) + 1.0])
    th = np.array(quartic_sm_fit(x))
    G, b = quartic_normal_equations(x)
    assert np.linalg.norm(G @ th + b) <= 1e-10 * max(1.0, np.linalg.norm(b))
    best = quartic_sm_objective(th, x)
    # brute-force oracle: every point of the 3^3 lattice around theta
    for d in itertools.product((-0.1, 0.0, 0.1), repeat=3):
        assert quartic_sm_objective(th + np.array(d), x) >= best - 1e-12


# ---------------------------------------------------------------- GGM score matching

def test_ggm_objective_trivial():
    p = GgmProblem(np.eye(2))
    assert ggm_sm_objective(np.eye(2), p) == -1.0
    assert ggm_sm_objective(np.zeros((2, 2)), p) == 0.0
    with pytest.raises(DimensionMismatch):
        ggm_sm_objective(np.eye(3), p)


def test_ggm_objective_term_by_term():
    g = np.random.default_rng(1)
    S = _spd(3, 2)
    B = g.standard_normal((3, 3))
    K = B + B.T
    p = GgmProblem(S, lam=0.3, rho=0.2)
    quad = sum(K[i, a] * S[a, b] * K[b, i] for i in range(3) for a in range(3) for b in range(3))
    off = sum(abs(K[i, j]) for i in range(3) for j in range(3) if i != j)
    ref = 0.5 * quad - np.trace(K) + 0.1 * np.sum(K ** 2) + 0.3 * off
    assert_allclose(ggm_sm_objective(K, p), ref, rtol=1e-12)


def test_ggm_problem_validation():
    with pytest.raises(ValueError):
        GgmProblem(np.array([[1.0, 0.2], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GgmProblem(np.eye(2), lam=-1.0)
    with pytest.raises(DimensionMismatch):
        GgmProblem(np.ones((2, 3)))


def test_prox_unregularized_recovers_inverse():
    S = _spd(10, 3)
    est = ggm_sm_prox_fit(GgmProblem(S, max_iter=20_000, tol=1e-13))
    Sinv = np.linalg.inv(S)
    assert np.linalg.norm(est.K - Sinv) / np.linalg.norm(Sinv) < 1e-6


def test_prox_identity_fixed_point():
    est = ggm_sm_prox_fit(GgmProblem(np.eye(4)))
    assert_allclose(est.K, np.eye(4), atol=1e-15)
    assert est.shift == 0.0


def test_prox_large_lambda_zeroes_offdiagonals():
    S = _spd(3, 4)
    est = ggm_sm_prox_fit(GgmProblem(S, lam=np.linalg.norm(S, 2) + 1.0))
    off = est.K - np.diag(np.diag(est.K))
    assert_array_equal(off, 0.0)
    # with a diagonal K the objective is separable: K_ii = 1 / S_ii
    assert_allclose(np.diag(est.K), 1.0 / np.diag(S), rtol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_prox_monotone_and_valid(seed, lam, rho):
    S = _spd(5, seed)
    est = ggm_sm_prox_fit(GgmProblem(S, lam, rho, max_iter=200), track=True)
    assert np.all(np.diff(est.objective) <= 1e-10)
    assert np.max(np.abs(est.K - est.K.T)) <= 1e-10
    assert est.shift >= 0.0
    assert np.linalg.eigvalsh(est.K)[0] > 0


# ---------------------------------------------------------------- graphical lasso

def test_glasso_unpenalized():
    S = _spd(6, 5)
    est = glasso_fit(S, 0.0, iters=5000, tol=1e-12)
    Sinv = np.linalg.inv(S)
    assert np.linalg.norm(est.K - Sinv) / np.linalg.norm(Sinv) < 1e-5
    assert_allclose(glasso_fit(np.eye(3), 0.0).K, np.eye(3), atol=1e-12)


def _grid_glasso_2d(S, alpha):
    # dense coarse-to-fine grid over (K11, K12, K22)
    def obj(a, b, c):
        det = a * c - b * b
        with np.errstate(invalid="ignore", divide="ignore"):
            val = S[0, 0] * a + 2 * S[0, 1] * b + S[1, 1] * c - np.log(det) + 2 * alpha * np.abs(b)
        return np.where((a > 0) & (det > 0), val, np.inf)

    centre, half = np.array([1.0, 0.0, 1.0]), np.array([1.0, 1.0, 1.0])
    for _ in range(30):
        axes = [np.linspace(c - h, c + h, 41) for c, h in zip(centre, half)]
        A, B, C = np.meshgrid(*axes, indexing="ij")
        v = obj(A, B, C)
        i = np.unravel_index(np.argmin(v), v.shape)
        centre = np.array([A[i], B[i], C[i]])
        half = half * 0.5
    return centre


def test_glasso_2d_grid_oracle():
    S = np.array([[1.0, 0.5], [0.5, 1.0]])
    a, b, c = _grid_glasso_2d(S, 0.1)
    # frozen oracle output; equals inv([[1, 0.4], [0.4, 1]])
    assert_allclose([a, b, c], [1.1904761904761905, -0.47619047619047616, 1.1904761904761905],
                    atol=1e-6)
    est = glasso_fit(S, 0.1, iters=2000, tol=1e-12)
    assert_allclose(est.K, [[a, b], [b, c]], atol=1e-3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.3))
def test_glasso_monotone_spd(seed, alpha):
    S = _spd(5, seed)
    est = glasso_fit(S, alpha, iters=100, track=True)
    assert np.all(np.diff(est.objective) <= 1e-10 * np.abs(est.objective[0]))
    assert np.linalg.eigvalsh(est.K)[0] > 0
    assert_allclose(glasso_objective(est.K, S, alpha), est.objective[-1], rtol=1e-12)


def test_random_sparse_precision_spd():
    K = random_sparse_precision(40, np.random.default_rng(0), edge_prob=0.1)
    assert_array_equal(K, K.T)
    assert np.linalg.eigvalsh(K)[0] > 0


def test_ggm_benchmark_rows():
    rows = ggm_benchmark(20, 200, 2, 0.05, 0.01, 0.05, np.random.default_rng(0), iters=50)
    assert len(rows) == 2
    for r in rows:
        assert np.isfinite([r.rmse_mle, r.rmse_sm]).all()
        assert r.ct_mle_sec >= 0 and r.ct_sm_sec >= 0


# ---------------------------------------------------------------- Hutchinson

def test_hutchinson_constant_and_antisymmetric():
    rng = np.random.default_rng(0)
    const = lambda X: np.ones_like(X) * 3.0
    assert hutchinson_divergence(const, [0.5, -1.0], 5, rng) == 0.0
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    assert hutchinson_divergence(None, [0.0, 0.0], 7, rng, jacobian=A) == 0.0
    assert abs(hutchinson_divergence(lambda X: X @ A.T, [0.3, 0.2], 7, rng)) < 1e-9


def test_hutchinson_trace():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    # the estimator has standard deviation |A12 + A21| / sqrt(probes) = 0.05 here
    rng = np.random.default_rng(1)
    assert abs(hutchinson_divergence(None, [0.0, 0.0], 10_000, rng, jacobian=A) - 5.0) < 0.1
    rng = np.random.default_rng(2)
    assert abs(hutchinson_divergence(lambda X: X @ A.T, [1.0, 1.0], 10_000, rng) - 5.0) < 0.1
    with pytest.raises(ValueError):
        hutchinson_divergence(None, [0.0], 0, rng, jacobian=np.eye(1))


# ---------------------------------------------------------------- Stein residuals

_STEIN_FIELDS = [
    lambda X: X,
    lambda X: np.ones_like(X),
    lambda X: X ** 2,
    lambda X: X ** 3,
    lambda X: np.sin(X),
    lambda X: np.cos(X),
    lambda X: np.exp(-0.5 * X ** 2),
    lambda X: np.tanh(X),
    lambda X: X * np.exp(-X ** 2),
    lambda X: X[:, ::-1] * X,
]


def test_stein_residual_suite():
    X = np.random.default_rng(0).standard_normal((20_000, 2))
    score = lambda Z: -Z
    for f in _STEIN_FIELDS:
        m, se = stein_residual(score, f, X)
        assert abs(m) < 3 * se + 1e-12


def test_stein_residual_trivial():
    X = np.random.default_rng(1).standard_normal((100, 1))
    assert stein_residual(lambda Z: -Z, lambda Z: np.zeros_like(Z), X) == (0.0, 0.0)
    with pytest.raises(EmptySample):
        stein_residual(lambda Z: -Z, lambda Z: Z, np.zeros((0, 1)))


def test_stein_residual_misspecified_score_detected():
    X = np.random.default_rng(2).standard_normal((20_000, 1)) + 1.0
    m, se = stein_residual(lambda Z: -Z, lambda Z: np.ones_like(Z), X)
    assert abs(m) > 10 * se


# ---------------------------------------------------------------- James-Stein

@pytest.mark.parametrize("d", [3, 5, 10])
@pytest.mark.parametrize("kind", ["zero", "james-stein"])
def test_risk_identity(d, kind):
    r = james_stein_risk(d, np.linspace(0, 1, d), 20_000, np.random.default_rng(d), kind)
    assert abs(r.risk_direct - r.risk_stein) < 3 * np.hypot(r.se_direct, r.se_stein)
    if kind == "zero":
        assert abs(r.risk_direct - d) < 3 * r.se_direct


def test_js_risk_values():
    r3 = james_stein_risk(3, 0.0, 100_000, np.random.default_rng(0))
    assert abs(r3.risk_direct - 2.0) < 0.1
    r5 = james_stein_risk(5, 0.0, 100_000, np.random.default_rng(1))
    assert abs(r5.risk_direct - 2.0) < 0.15
    with pytest.raises(DimensionTooSmall):
        james_stein_risk(2, 0.0, 10, np.random.default_rng(0))


# ---------------------------------------------------------------- denoising score matching

def test_dsm_gaussian_slope():
    x = np.random.default_rng(0).standard_normal(2000)
    cfg = TrainConfig(step_size=3e-3, epochs=30, batch_size=128, hidden=(32,))
    m = dsm_fit(x, 0.5, cfg, np.random.default_rng(1))
    s0 = forward(m, [[0.0]])[0, 0]
    slope = (forward(m, [[0.25]])[0, 0] - forward(m, [[-0.25]])[0, 0]) / 0.5
    assert abs(s0) < 0.15
    assert abs(slope + 1 / 1.25) < 0.3
    val, const = dsm_loss(m, x, 0.5, np.random.default_rng(2))
    assert val < const


def test_dsm_point_mass():
    cfg = TrainConfig(step_size=3e-3, epochs=20, batch_size=128, hidden=(16,))
    m = dsm_fit(np.zeros(1000), 1.0, cfg, np.random.default_rng(3))
    y = np.linspace(-2, 2, 21)[:, None]
    assert np.max(np.abs(forward(m, y)[:, 0] + y[:, 0])) < 0.2


def test_dsm_rejects_bad_sigma():
    with pytest.raises(ValueError):
        dsm_fit(np.zeros(10), 0.0, TrainConfig(epochs=1), np.random.default_rng(0))
