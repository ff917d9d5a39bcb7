"""Cross-fitted, orthogonalized estimation.

Covers the AIPW average treatment effect with sandwich standard errors, CATE
pseudo-outcomes, the efficient scores of the linear model with unknown
error law (through its third and fourth moments), and a finite-difference
probe of Neyman orthogonality.

Observational data are passed as arrays ``X`` (n, p), ``A`` (n,) in {0, 1}
and ``Y`` (n,).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ArmMissing, BadK, DegenerateMoments, NoConvergence, SingularDesign
from .mlp import TrainConfig, fit_regressor

DEFAULT_CLIP = 0.01


# ---------------------------------------------------------------- folds

@dataclass
class FoldPlan:
    n: int
    K: int
    assignment: np.ndarray

    def test_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)


def fold_split(n: int, K: int, rng: np.random.Generator) -> FoldPlan:
    """Balanced random partition of ``range(n)`` into ``K`` folds."""
    if not 2 <= K <= n:
        raise BadK(f"need 2 <= K <= n, got K={K}, n={n}")
    ids = np.empty(n, dtype=int)
    ids[rng.permutation(n)] = np.arange(n) % K
    return FoldPlan(n, K, ids)


# ---------------------------------------------------------------- learners

def add_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    return np.hstack([np.ones((X.shape[0], 1)), X])


def ols_fit(X, y) -> np.ndarray:
    """Least-squares coefficients (intercept first); raises on rank deficiency."""
    Z = add_intercept(X)
    coef, _, rank, _ = np.linalg.lstsq(Z, np.asarray(y, dtype=float), rcond=None)
    if rank < Z.shape[1]:
        raise SingularDesign(f"design has rank {rank} < {Z.shape[1]}")
    return coef


def logistic_fit(X, a, ridge: float = 1e-6, iters: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Logistic regression by iteratively reweighted least squares."""
    Z = add_intercept(X)
    a = np.asarray(a, dtype=float)
    w = np.zeros(Z.shape[1])
    for _ in range(iters):
        eta = np.clip(Z @ w, -30, 30)
        p = 1.0 / (1.0 + np.exp(-eta))
        W = p * (1 - p)
        H = Z.T @ (Z * W[:, None]) + ridge * np.eye(Z.shape[1])
        g = Z.T @ (a - p) - ridge * w
        step = np.linalg.solve(H, g)
        w = w + step
        if np.max(np.abs(step)) < tol:
            return w
    return w


def _linear_predictor(coef):
    return lambda X: add_intercept(X) @ coef


def _logistic_predictor(coef):
    return lambda X: 1.0 / (1.0 + np.exp(-np.clip(add_intercept(X) @ coef, -30, 30)))


@dataclass
class NuisanceSet:
    """Outcome regressions ``mu0``, ``mu1`` and propensity ``e`` (all callables)."""

    mu0: Callable
    mu1: Callable
    e: Callable
    clip: float = DEFAULT_CLIP

    def __post_init__(self):
        if not 0.0 < self.clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")

    def propensity(self, X) -> np.ndarray:
        return np.clip(np.asarray(self.e(X), dtype=float), self.clip, 1.0 - self.clip)


def linear_learner(X, A, Y, rng=None) -> NuisanceSet:
    """Per-arm OLS outcome models and a logistic propensity."""
    A = np.asarray(A)
    c0 = ols_fit(X[A == 0], Y[A == 0])
    c1 = ols_fit(X[A == 1], Y[A == 1])
    return NuisanceSet(_linear_predictor(c0), _linear_predictor(c1),
                       _logistic_predictor(logistic_fit(X, A)))


def mlp_learner(cfg: TrainConfig) -> Callable:
    """Per-arm neural outcome models with a logistic propensity."""

    def learn(X, A, Y, rng):
        A = np.asarray(A)
        m0 = fit_regressor(X[A == 0], Y[A == 0], cfg, rng)
        m1 = fit_regressor(X[A == 1], Y[A == 1], cfg, rng)
        return NuisanceSet(m0, m1, _logistic_predictor(logistic_fit(X, A)))

    return learn


def with_known_propensity(learner: Callable, e: Callable) -> Callable:
    """Wrap a learner so the propensity is the supplied design value."""

    def learn(X, A, Y, rng):
        ns = learner(X, A, Y, rng)
        return NuisanceSet(ns.mu0, ns.mu1, e, ns.clip)

    return learn


# ---------------------------------------------------------------- ATE

def aipw_score(X, A, Y, psi: float, nuis: NuisanceSet) -> np.ndarray:
    """Doubly robust score per observation with clipped propensity."""
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    m0, m1 = np.asarray(nuis.mu0(X), float), np.asarray(nuis.mu1(X), float)
    e = nuis.propensity(X)
    return (m1 - m0) + A * (Y - m1) / e - (1 - A) * (Y - m0) / (1 - e) - psi


def cate_pseudo_outcomes(X, A, Y, nuis: NuisanceSet) -> np.ndarray:
    """AIPW pseudo-outcome whose conditional mean given ``X`` is the CATE."""
    return aipw_score(X, A, Y, 0.0, nuis)


@dataclass
class AteReport:
    psi: float
    se: float
    ci95: tuple
    fold_means: list = field(default_factory=list)
    n: int = 0
    K: int = 0

    def to_json(self) -> str:
        doc = asdict(self)
        doc["ci95"] = list(self.ci95)
        return json.dumps(doc, indent=2)

    def covers(self, truth: float) -> bool:
        return self.ci95[0] <= truth <= self.ci95[1]


def ate_from_scores(phi: np.ndarray, fold_ids: np.ndarray | None = None, K: int = 0) -> AteReport:
    """Report for the estimating equation ``mean(phi) - psi = 0``."""
    phi = np.asarray(phi, dtype=float)
    n = phi.size
    psi = float(phi.mean())
    se = float(np.std(phi, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    fm = [] if fold_ids is None else [float(phi[fold_ids == k].mean()) for k in range(K)]
    return AteReport(psi, se, (psi - 1.96 * se, psi + 1.96 * se), fm, n, K)


def ate_crossfit(X, A, Y, K: int, learner: Callable = linear_learner, clip: float = DEFAULT_CLIP,
                 rng: np.random.Generator | None = None, return_nuisance: bool = False):
    """Cross-fitted AIPW estimate of the average treatment effect.

    The learner for fold ``k`` only ever receives the complement rows. The
    score is linear in ``psi`` with unit slope, so the solution is the mean
    of the psi-free scores and the sandwich variance is their variance / n.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    A = np.asarray(A).astype(int)
    Y = np.asarray(Y, dtype=float)
    plan = fold_split(len(Y), K, rng)
    phi = np.empty(len(Y))
    fitted = []
    for k in range(K):
        tr, te = plan.train_idx(k), plan.test_idx(k)
        if A[tr].min() == A[tr].max():
            raise ArmMissing(f"training complement of fold {k} has a single arm")
        ns = learner(X[tr], A[tr], Y[tr], rng)
        ns = NuisanceSet(ns.mu0, ns.mu1, ns.e, clip)
        phi[te] = aipw_score(X[te], A[te], Y[te], 0.0, ns)
        fitted.append(ns)
    rep = ate_from_scores(phi, plan.assignment, K)
    if return_nuisance:
        return rep, plan, fitted, phi
    return rep


def ipw_means(X, A, Y, e: Callable, clip: float = DEFAULT_CLIP) -> tuple[float, float]:
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    p = np.clip(np.asarray(e(X), dtype=float), clip, 1 - clip)
    return float(np.mean(A * Y / p)), float(np.mean((1 - A) * Y / (1 - p)))


def gformula_mean(X, mu_a: Callable) -> float:
    return float(np.mean(mu_a(X)))


def write_replications_csv(path, rows: Sequence[dict]) -> None:
    cols = ["rep", "psi_hat", "se", "lo", "hi", "covered"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in cols})


# ---------------------------------------------------------------- efficient scores

@dataclass(frozen=True)
class EffScoreCoef:
    mu3: float
    mu4: float
    b: float
    c: float

    def projected_score(self, e) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        return self.b * e + self.c * (e * e - 1.0)

    def projected_score_deriv(self, e) -> np.ndarray:
        return self.b + 2.0 * self.c * np.asarray(e, dtype=float)


def eff_coeffs_from_moments(mu3: float, mu4: float) -> EffScoreCoef:
    den = mu4 - 1.0 - mu3 * mu3
    if not den > 1e-8:
        raise DegenerateMoments(f"mu4 - 1 - mu3^2 = {den:.3g} is not positive")
    return EffScoreCoef(float(mu3), float(mu4), float(-(mu4 - 1.0) / den), float(mu3 / den))


def residual_eff_coeffs(residuals) -> EffScoreCoef:
    """Coefficients of the projected score from standardized residual moments."""
    r = np.asarray(residuals, dtype=float)
    e = (r - r.mean()) / r.std()
    return eff_coeffs_from_moments(float(np.mean(e ** 3)), float(np.mean(e ** 4)))


def efficient_scores_linreg(X, y, beta, sigma2: float, coef: EffScoreCoef):
    """Per-observation scores ``(psi_beta (n, p), psi_sigma2 (n,))``.

    ``X`` should already contain the intercept column if one is wanted.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sigma = math.sqrt(sigma2)
    e = (np.asarray(y, dtype=float) - X @ np.asarray(beta, dtype=float)) / sigma
    s = coef.projected_score(e)
    return -X * (s / sigma)[:, None], -(1.0 + e * s) / (2.0 * sigma2)


@dataclass
class _RowCoefs:
    b: np.ndarray
    c: np.ndarray


def _profiled_scores(Z, y, slopes, coefs, intercept: bool):
    """Slope scores with location and scale profiled out by residual moments.

    Returns ``(scores (n, q), beta_full, sigma2)``. With an intercept the
    residuals are centred, so the intercept equation holds identically and
    the covariates enter centred.
    """
    if intercept:
        X = Z[:, 1:]
        r0 = y - X @ slopes
        alpha = float(r0.mean())
        r = r0 - alpha
        Xc = X - X.mean(0)
        beta = np.concatenate([[alpha], slopes])
    else:
        Xc = Z
        r = y - Z @ slopes
        beta = slopes
    sigma2 = float(np.mean(r * r))
    sigma = math.sqrt(sigma2)
    e = r / sigma
    sc = coefs.b * e + coefs.c * (e * e - 1.0)
    return -Xc * (sc / sigma)[:, None], beta, sigma2


def _profiled_jacobian(Z, y, slopes, coefs, intercept, h=1e-6) -> np.ndarray:
    q = slopes.size
    J = np.empty((q, q))
    scale = max(1.0, float(np.max(np.abs(slopes))))
    for j in range(q):
        d = np.zeros(q)
        d[j] = h * scale
        fp = _profiled_scores(Z, y, slopes + d, coefs, intercept)[0].mean(0)
        fm = _profiled_scores(Z, y, slopes - d, coefs, intercept)[0].mean(0)
        J[:, j] = (fp - fm) / (2 * d[j])
    return J


def _solve_equations(Z, y, start, coefs, intercept, max_iter=100, tol=1e-12):
    """Damped Newton on the mean profiled slope scores."""
    theta = start.copy()
    f = _profiled_scores(Z, y, theta, coefs, intercept)[0].mean(0)
    for it in range(1, max_iter + 1):
        fn = float(np.linalg.norm(f))
        if fn < tol:
            return theta, it - 1
        J = _profiled_jacobian(Z, y, theta, coefs, intercept)
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            raise SingularDesign("score Jacobian is singular") from None
        lam = 1.0
        while True:
            cand = theta + lam * step
            fc = _profiled_scores(Z, y, cand, coefs, intercept)[0].mean(0)
            if np.all(np.isfinite(fc)) and np.linalg.norm(fc) <= fn * (1 - 1e-4 * lam):
                break
            lam *= 0.5
            if lam < 1e-10:
                if fn < 1e-9:   # already at the floating-point floor
                    return theta, it
                raise NoConvergence("line search failed to reduce the score norm")
        theta, f = cand, fc
        if np.linalg.norm(lam * step) < tol * (1 + np.linalg.norm(theta)):
            return theta, it
    raise NoConvergence(f"damped Newton did not converge in {max_iter} iterations")


@dataclass
class SemiparamFit:
    beta: np.ndarray
    sigma2: float
    se: np.ndarray
    coefs: list
    iterations: int
    fold_betas: list = field(default_factory=list)


def semiparam_linreg_fit(X, y, K: int, rng: np.random.Generator, intercept: bool = True,
                         moments: tuple[float, float] | None = None,
                         aggregate: str = "pooled") -> SemiparamFit:
    """Cross-fitted efficient-score estimate of ``(beta, sigma2)``.

    For each fold the residual moments come from an OLS fit on the
    complement (or are fixed by ``moments``), and the fold's rows use the
    resulting projected score. Intercept and scale are profiled out by the
    residual mean and root mean square; the slope equations are solved by
    damped Newton from the OLS start.

    ``aggregate="pooled"`` solves the stacked cross-fitted equations jointly,
    which reproduces OLS exactly under Gaussian moments.
    ``aggregate="average"`` solves each fold on its own rows and averages.
    Standard errors use the sandwich ``J^{-1} V J^{-T} / n``.
    """
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Z = add_intercept(X) if intercept else X
    y = np.asarray(y, dtype=float)
    n, p = Z.shape
    if np.linalg.matrix_rank(Z) < p:
        raise SingularDesign("design matrix is rank deficient")
    plan = fold_split(n, K, rng)
    bvec, cvec = np.empty(n), np.empty(n)
    coefs = []
    for k in range(K):
        tr, te = plan.train_idx(k), plan.test_idx(k)
        if moments is not None:
            cf = eff_coeffs_from_moments(*moments)
        else:
            if np.linalg.matrix_rank(Z[tr]) < p:
                raise SingularDesign(f"fold {k} complement is rank deficient")
            bt = np.linalg.lstsq(Z[tr], y[tr], rcond=None)[0]
            cf = residual_eff_coeffs(y[tr] - Z[tr] @ bt)
        bvec[te], cvec[te] = cf.b, cf.c
        coefs.append(cf)
    b_ols = np.linalg.lstsq(Z, y, rcond=None)[0]
    if float(np.mean((y - Z @ b_ols) ** 2)) <= 1e-24 * max(1.0, float(np.mean(y * y))):
        return SemiparamFit(b_ols, 0.0, np.zeros(p), coefs, 0)
    start = b_ols[1:] if intercept else b_ols
    rc = _RowCoefs(bvec, cvec)
    fold_betas = []
    if aggregate == "pooled":
        slopes, its = _solve_equations(Z, y, start, rc, intercept)
    elif aggregate == "average":
        sols, its = [], 0
        for k in range(K):
            te = plan.test_idx(k)
            sl, it = _solve_equations(Z[te], y[te], start, _RowCoefs(bvec[te], cvec[te]), intercept)
            sols.append(sl)
            fold_betas.append(_profiled_scores(Z[te], y[te], sl, _RowCoefs(bvec[te], cvec[te]),
                                               intercept)[1])
            its += it
        slopes = np.mean(sols, axis=0)
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    psi, beta, sigma2 = _profiled_scores(Z, y, slopes, rc, intercept)
    J = _profiled_jacobian(Z, y, slopes, rc, intercept)
    V = psi.T @ psi / n
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        raise SingularDesign("score Jacobian is singular") from None
    se_slopes = np.sqrt(np.diag(Jinv @ V @ Jinv.T / n))
    if intercept:
        # delta method for alpha = mean(y) - xbar . slopes
        xbar = Z[:, 1:].mean(0)
        r = y - Z @ beta
        var_a = float(np.var(r) / n + xbar @ (Jinv @ V @ Jinv.T / n) @ xbar)
        se = np.concatenate([[math.sqrt(var_a)], se_slopes])
    else:
        se = se_slopes
    return SemiparamFit(beta, sigma2, se, coefs, its, fold_betas)


# ---------------------------------------------------------------- orthogonality

def _add_direction(eta0: dict, h: dict, eps: float) -> dict:
    out = dict(eta0)
    for key, hk in h.items():
        base = eta0[key]
        out[key] = (lambda X, b=base, g=hk: b(X) + eps * g(X))
    return out


def orthogonality_fd_check(moment: Callable, theta0, eta0: dict, direction: dict,
                           eps_grid: Sequence[float] = (-0.1, -0.05, 0.0, 0.05, 0.1),
                           perturb: Callable | None = None, return_fit: bool = False):
    """Linear coefficient of the mean moment along ``eta0 + eps * direction``.

    ``moment(theta, eta)`` returns the sample-mean moment. ``eta0`` and
    ``direction`` are dicts of callables; the default perturbation adds them.
    A quadratic is fitted through the grid and its linear coefficient
    returned (with the full coefficients when ``return_fit``).
    """
    eps = np.asarray(eps_grid, dtype=float)
    if not np.allclose(np.sort(eps), np.sort(-eps)):
        raise ValueError("eps grid must be symmetric about zero")
    perturb = perturb or _add_direction
    vals = np.array([moment(theta0, perturb(eta0, direction, float(e))) for e in eps])
    quad, lin, const = np.polyfit(eps, vals, 2)
    return (float(lin), (float(quad), float(lin), float(const))) if return_fit else float(lin)


def orthogonality_contrast(X, A, Y, mu0: Callable, mu1: Callable, e: Callable, psi: float,
                           eps_grid: Sequence[float] = (-0.1, -0.05, 0.0, 0.05, 0.1)) -> list[dict]:
    """Slopes of the AIPW and the naive plug-in moments in four nuisance directions.

    The naive moment for an outcome direction is the regression form
    ``mean(mu1 - mu0) - psi``; for a propensity direction it is the IPW form.
    Propensity directions are bounded so the perturbed values stay in (0, 1).
    """
    eta0 = {"mu0": mu0, "mu1": mu1, "e": e}

    def aipw(theta, eta):
        return float(np.mean(aipw_score(X, A, Y, theta, NuisanceSet(eta["mu0"], eta["mu1"], eta["e"]))))

    def gform(theta, eta):
        return gformula_mean(X, eta["mu1"]) - gformula_mean(X, eta["mu0"]) - theta

    def ipw(theta, eta):
        m1, m0 = ipw_means(X, A, Y, eta["e"])
        return m1 - m0 - theta

    dirs = [
        ("mu1", {"mu1": lambda Z: 1.0 + Z[:, 0]}, gform),
        ("mu0", {"mu0": lambda Z: Z[:, -1] ** 2}, gform),
        ("e_tanh", {"e": lambda Z: 0.5 * np.tanh(Z[:, 0])}, ipw),
        ("e_const", {"e": lambda Z: np.full(len(Z), 0.5)}, ipw),
    ]
    rows = []
    for name, h, naive in dirs:
        s_aipw = orthogonality_fd_check(aipw, psi, eta0, h, eps_grid)
        s_naive = orthogonality_fd_check(naive, psi, eta0, h, eps_grid)
        rows.append({"direction": name, "slope_aipw": s_aipw, "slope_naive": s_naive,
                     "ratio": abs(s_naive) / max(abs(s_aipw), 1e-300)})
    return rows
