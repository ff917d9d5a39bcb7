import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from scoreflow import dgp
from scoreflow.copula import (conditional_corr, copula_sample, field_grid, flow_copula_train,
                              kendall_tau, ks_uniform, logit_inverse, logit_map, probit_inverse,
                              probit_map, ranks_to_pseudo)
from scoreflow.errors import OutOfUnitInterval, TooFewRows
from scoreflow.mlp import TrainConfig
from scoreflow.ode import OdeConfig

CFG = TrainConfig(step_size=3e-3, epochs=30, batch_size=128, hidden=(32, 32))


# ---------------------------------------------------------------- pseudo-observations

def test_pseudo_obs_values():
    assert_allclose(ranks_to_pseudo([5.0, 7.0]).U[:, 0], [0.25, 0.75])
    assert_allclose(ranks_to_pseudo([1.0, 1.0, 2.0]).U[:, 0], [1 / 3, 1 / 3, 2.5 / 3])
    po = ranks_to_pseudo(np.arange(10.0), eps=0.1)
    assert po.U.min() == 0.1 and po.U.max() == 0.9
    with pytest.raises(TooFewRows):
        ranks_to_pseudo([[1.0, 2.0]])


def test_pseudo_obs_default_eps_leaves_grid():
    X = np.random.default_rng(0).standard_normal((50, 3))
    po = ranks_to_pseudo(X)
    assert po.eps == 1 / 100
    for j in range(3):
        assert_allclose(np.sort(po.U[:, j]), (np.arange(1, 51) - 0.5) / 50)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pseudo_obs_rank_invariance(seed):
    X = np.random.default_rng(seed).standard_normal((40, 2))
    Y = np.column_stack([np.exp(X[:, 0]), X[:, 1] ** 3 + 2 * X[:, 1]])
    assert_array_equal(ranks_to_pseudo(X).U, ranks_to_pseudo(Y).U)


# ---------------------------------------------------------------- transforms

def test_transform_values():
    assert logit_map(0.5) == 0.0 and probit_map(0.5) == 0.0
    assert abs(logit_map(0.7310585786300049) - 1.0) < 1e-6
    # normal CDF at 1.96 from its series, independent of the implementation
    x = 1.96
    phi = 0.5 + sum((-1) ** k * x ** (2 * k + 1) / (math.factorial(k) * 2 ** k * (2 * k + 1))
                    for k in range(60)) / math.sqrt(2 * math.pi)
    assert abs(probit_map(phi) - 1.96) < 1e-6
    for bad in (0.0, 1.0, -0.1, 1.5, np.nan):
        with pytest.raises(OutOfUnitInterval):
            logit_map(bad)
        with pytest.raises(OutOfUnitInterval):
            probit_map(bad)


def test_probit_accuracy_on_wide_range():
    from scipy.stats import norm  # oracle: the inverse applied to an independent CDF
    # lower half only: near u = 1 the CDF value itself loses digits to rounding
    z = np.linspace(-6.3, 0.0, 1001)
    u = norm.cdf(z)
    assert np.max(np.abs(probit_map(u) - z)) < 1e-8
    # 40-digit erfinv values at the exact binary endpoints, frozen
    u = np.array([1e-10, 1 - 1e-10])
    assert np.max(np.abs(probit_map(u) - [-6.3613409024040561991, 6.3613408896974218642])) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1 - 1e-4))
def test_transform_roundtrip(u):
    assert abs(logit_inverse(logit_map(u)) - u) < 1e-9
    assert abs(probit_inverse(probit_map(u)) - u) < 1e-9


def test_clipping_necessity():
    # unclipped boundary pseudo-observations from a large sample sit far out in z-space
    n = 10 ** 7
    u_edge = np.array([0.5 / n, 1 - 0.5 / n])
    assert np.all(np.abs(logit_map(u_edge)) > 7)
    assert np.all(np.abs(logit_map(np.clip(u_edge, 1e-3, 1 - 1e-3))) < 7)


# ---------------------------------------------------------------- Kendall tau

def test_kendall_tau_extremes_and_ties():
    x = np.arange(10.0)
    assert kendall_tau(np.column_stack([x, x])) == 1.0
    assert kendall_tau(np.column_stack([x, -x])) == -1.0
    assert kendall_tau([[0.0, 0.0], [0.0, 1.0]]) == 0.0
    with pytest.raises(TooFewRows):
        kendall_tau([[0.0, 0.0]])
    with pytest.raises(ValueError):
        kendall_tau(np.zeros((5, 3)))


def test_kendall_tau_against_scipy():
    from scipy.stats import kendalltau  # oracle: tau-a equals tau-b without ties
    U = np.random.default_rng(1).random((300, 2))
    U[:, 1] += 0.5 * U[:, 0]
    assert_allclose(kendall_tau(U, chunk=37), kendalltau(U[:, 0], U[:, 1])[0], rtol=1e-12)


def test_kendall_tau_gaussian_identity():
    X = dgp.gaussian_pair(4000, 0.5, np.random.default_rng(2))
    assert abs(kendall_tau(X) - 1 / 3) < 0.05


def test_ks_uniform():
    u = (np.arange(100) + 0.5) / 100
    assert_allclose(ks_uniform(u), 0.005)
    assert ks_uniform(np.random.default_rng(3).random(5000)) < 0.03


# ---------------------------------------------------------------- flow copula

@pytest.fixture(scope="module")
def sshape():
    X = dgp.copula_sign_switch(3000, np.random.default_rng(4))
    m = flow_copula_train(X, "logit", CFG, np.random.default_rng(5))
    G = copula_sample(m, 5000, np.random.default_rng(6), OdeConfig(50, "rk4"))
    return X, m, G


def test_sshape_sign_pattern(sshape):
    X, _, G = sshape
    U = ranks_to_pseudo(X).U
    lo_d, hi_d = conditional_corr(U, 0.0, 0.3), conditional_corr(U, 0.7, 1.0)
    lo_g, hi_g = conditional_corr(G, 0.0, 0.3), conditional_corr(G, 0.7, 1.0)
    assert lo_d < 0 < hi_d
    assert np.sign(lo_g) == np.sign(lo_d) and np.sign(hi_g) == np.sign(hi_d)


def test_sample_marginals_uniform_and_in_range(sshape):
    _, m, G = sshape
    assert G.shape == (5000, 2)
    assert np.all(G >= m.eps) and np.all(G <= 1 - m.eps)
    assert ks_uniform(G[:, 0]) < 0.05 and ks_uniform(G[:, 1]) < 0.05


def test_sample_empty_and_deterministic(sshape):
    _, m, _ = sshape
    assert copula_sample(m, 0, np.random.default_rng(0)).shape == (0, 2)
    a = copula_sample(m, 20, np.random.default_rng(7), OdeConfig(10))
    b = copula_sample(m, 20, np.random.default_rng(7), OdeConfig(10))
    assert_array_equal(a, b)


def test_field_grid_shape(sshape):
    _, m, _ = sshape
    F = field_grid(m, 0.5, 5)
    assert F.shape == (25, 4) and np.all(np.isfinite(F))


def test_independent_uniforms():
    X = np.random.default_rng(8).random((2000, 2))
    m = flow_copula_train(X, "probit", TrainConfig(step_size=3e-3, epochs=15, batch_size=128, hidden=(16, 16)),
                          np.random.default_rng(9))
    G = copula_sample(m, 1500, np.random.default_rng(10), OdeConfig(30))
    assert abs(kendall_tau(G)) < 0.1


def test_comonotone():
    x = np.random.default_rng(11).standard_normal(2000)
    m = flow_copula_train(np.column_stack([x, x]), "probit",
                          TrainConfig(step_size=3e-3, epochs=30, batch_size=128, hidden=(32, 32)),
                          np.random.default_rng(12))
    G = copula_sample(m, 1500, np.random.default_rng(13), OdeConfig(30))
    assert kendall_tau(G) >= 0.7


def test_train_errors():
    with pytest.raises(TooFewRows):
        flow_copula_train(np.zeros((50, 2)), "logit", CFG, np.random.default_rng(0))
    with pytest.raises(ValueError):
        flow_copula_train(np.random.default_rng(0).random((200, 2)), "cauchit", CFG, np.random.default_rng(0))
