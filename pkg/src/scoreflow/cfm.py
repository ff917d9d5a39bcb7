"""Conditional flow matching: training a velocity field and sampling from it.

The network sees ``[t, sin 2 pi t, cos 2 pi t, x, c]`` and regresses onto the
straight-line target ``x1 - x0``. Conditions are always standardized with the
training moments; standardizing the state is optional and applied before the
base draw, so the base law lives in the standardized coordinates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, Divergence, EmptyInput
from .mlp import Adam, Mlp, TrainConfig, _clamp_inplace, forward, init_mlp, input_jacobian, \
    lipschitz_upper_bound, loss_grad
from .mlp import from_json as mlp_from_json, to_json as mlp_to_json
from .ode import OdeConfig, logdensity_along_flow, ode_integrate
from .paths import linear_path, pair_minibatch

T_MAX = 1.0 - 1e-3
N_TIME_FEATURES = 3


def time_features(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    w = 2.0 * math.pi * t
    return np.column_stack([t, np.sin(w), np.cos(w)])


@dataclass
class FlowModel:
    """Trained velocity field ``v(t, x | c)`` plus the affine maps around it."""

    net: Mlp
    dim: int
    cond_dim: int = 0
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_scale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    c_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    c_scale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma_path: float = 0.0

    def __post_init__(self):
        if self.x_mean.size == 0:
            self.x_mean = np.zeros(self.dim)
            self.x_scale = np.ones(self.dim)
        if self.c_mean.size == 0:
            self.c_mean = np.zeros(self.cond_dim)
            self.c_scale = np.ones(self.cond_dim)
        if self.net.sizes[0] != N_TIME_FEATURES + self.dim + self.cond_dim:
            raise DimensionMismatch("net input does not match time + state + condition")

    @property
    def path(self) -> str:
        return "linear" if self.sigma_path == 0 else f"linear-with-noise({self.sigma_path:g})"

    def _cond(self, cond, n: int) -> np.ndarray:
        if self.cond_dim == 0:
            return np.zeros((n, 0))
        if cond is None:
            raise ValueError("this model needs a condition")
        c = np.asarray(cond, dtype=float).reshape(-1, self.cond_dim)
        if c.shape[0] == 1:
            c = np.repeat(c, n, axis=0)
        return (c - self.c_mean) / self.c_scale

    def latent_velocity(self, t, Z, cond=None) -> np.ndarray:
        """Field in the standardized coordinates the network was trained in."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        inp = np.hstack([time_features(t, len(Z)), Z, self._cond(cond, len(Z))])
        return forward(self.net, inp)

    def velocity(self, t, X, cond=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (X - self.x_mean) / self.x_scale
        return self.latent_velocity(t, Z, cond) * self.x_scale

    def field(self, cond=None):
        """``v(t, X)`` with the condition frozen, ready for the integrators."""
        return lambda t, X: self.velocity(t, X, cond)

    def sample(self, n: int, rng: np.random.Generator, cond=None,
               cfg: OdeConfig = OdeConfig(100, "rk4")) -> np.ndarray:
        z0 = rng.standard_normal((n, self.dim))
        return self.push(z0, cond, cfg)

    def push(self, z0, cond=None, cfg: OdeConfig = OdeConfig(100, "rk4"), trajectory=False):
        """Integrate base draws (standardized coordinates) to data space."""
        z0 = np.atleast_2d(np.asarray(z0, dtype=float))
        c = None if self.cond_dim == 0 else cond
        f = lambda t, Z: self.latent_velocity(t, Z, c)  # noqa: E731
        if trajectory:
            ts, zs = ode_integrate(f, z0, cfg, trajectory=True)
            return ts, zs * self.x_scale + self.x_mean
        return ode_integrate(f, z0, cfg) * self.x_scale + self.x_mean

    def invert(self, x1, cond=None, steps: int = 200) -> np.ndarray:
        """Run the flow backwards from data to the base coordinates."""
        z1 = (np.atleast_2d(np.asarray(x1, dtype=float)) - self.x_mean) / self.x_scale
        f = lambda t, Z: self.latent_velocity(t, Z, cond)  # noqa: E731
        return ode_integrate(f, z1, OdeConfig(steps, "rk4", "reverse"))

    def log_prob(self, x1, cond=None, steps: int = 100) -> np.ndarray:
        """Model log density via reverse integration with the exact Jacobian trace."""
        z1 = (np.atleast_2d(np.asarray(x1, dtype=float)) - self.x_mean) / self.x_scale
        f = lambda t, Z: self.latent_velocity(t, Z, cond)  # noqa: E731
        off = N_TIME_FEATURES

        def div(t, Z):
            inp = np.hstack([time_features(t, len(Z)), Z, self._cond(cond, len(Z))])
            J = input_jacobian(self.net, inp)[:, :, off:off + self.dim]
            return np.trace(J, axis1=1, axis2=2)

        z0, integ = logdensity_along_flow(f, z1, 0.0, OdeConfig(steps, "rk4", "reverse"),
                                          divergence=div)
        z0 = np.atleast_2d(z0)
        base = -0.5 * np.sum(z0 ** 2, axis=1) - 0.5 * self.dim * math.log(2 * math.pi)
        return base - np.atleast_1d(integ) - np.sum(np.log(self.x_scale))

    def lipschitz_bound(self) -> float:
        """Upper bound on the x-Lipschitz constant of the latent field."""
        return lipschitz_upper_bound(self.net)


def cfm_train(data, cfg: TrainConfig, rng: np.random.Generator, coupling: str = "independent",
              cond=None, standardize: bool = False, sigma_path: float = 0.0,
              history: list | None = None, init: Mlp | None = None,
              ema: float | None = None) -> FlowModel:
    """Fit ``v(t, x | c)`` by minibatch least squares onto ``x1 - x0``.

    Each minibatch draws fresh base points, pairs them with the data rows
    according to ``coupling`` (``independent``, ``assignment`` or
    ``entropic``), draws ``t`` uniformly on ``[0, 1 - 1e-3]`` and takes one
    optimizer step. ``history`` collects per-epoch mean losses. With
    ``ema`` set (e.g. 0.999) the returned network holds an exponential moving
    average of the iterates instead of the last one.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n == 0:
        raise EmptyInput("no training data")
    if standardize:
        xm, xs = X.mean(0), X.std(0) + 1e-12
    else:
        xm, xs = np.zeros(d), np.ones(d)
    Z = (X - xm) / xs
    if cond is not None:
        C = np.asarray(cond, dtype=float)
        C = C[:, None] if C.ndim == 1 else C
        if len(C) != n:
            raise DimensionMismatch("conditions and data differ in length")
        cm, cs = C.mean(0), C.std(0) + 1e-12
        Cs = (C - cm) / cs
    else:
        Cs = np.zeros((n, 0))
        cm = cs = np.zeros(0)
    k = Cs.shape[1]
    net = init.copy() if init is not None else init_mlp(
        [N_TIME_FEATURES + d + k, *cfg.hidden, d], rng, cfg.activation)
    opt = Adam(net, cfg.step_size)
    avg = net.copy() if ema else None
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = per_epoch * cfg.epochs
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        acc = 0.0
        for s in range(per_epoch):
            idx = order[s * bs:(s + 1) * bs]
            x1 = Z[idx]
            m = len(idx)
            x0 = rng.standard_normal((m, d))
            if coupling != "independent":
                # pairing by cost must keep the condition attached to its data row
                x0 = pair_minibatch(x0, x1, coupling, rng)
            t = rng.uniform(0.0, T_MAX, size=m)
            xi = rng.standard_normal((m, d)) if sigma_path else None
            ps = linear_path(x0, x1, t, sigma_path, xi)
            inp = np.hstack([time_features(t, m), ps.x_t, Cs[idx]])
            loss, gws, gbs = loss_grad(net, inp, ps.u, cfg.weight_decay)
            if not math.isfinite(loss):
                raise Divergence(f"loss became {loss} at step {step}")
            opt.step(net, gws, gbs, cfg.lr_at(step, total))
            if cfg.spectral_cap is not None:
                _clamp_inplace(net, cfg.spectral_cap)
            if avg is not None:
                # warm-up keeps the average from remembering the random init
                r = min(ema, (1.0 + step) / (10.0 + step))
                for pa, pn in zip(avg.weights + avg.biases, net.weights + net.biases):
                    pa *= r
                    pa += (1.0 - r) * pn
            acc += loss * m
            step += 1
        if history is not None:
            history.append(acc / n)
    if avg is not None:
        if cfg.spectral_cap is not None:
            _clamp_inplace(avg, cfg.spectral_cap)
        net = avg
    return FlowModel(net, d, k, xm, xs, cm, cs, sigma_path)


def conditional_cfm_train(cond, values, cfg: TrainConfig, rng: np.random.Generator,
                          standardize: bool = False, history: list | None = None,
                          ema: float | None = None) -> FlowModel:
    """Conditional flow for ``p(y | c)``; pairs are always independent."""
    cond = np.asarray(cond, dtype=float)
    if cond.size == 0:
        raise EmptyInput("no training pairs")
    return cfm_train(values, cfg, rng, "independent", cond=cond, standardize=standardize,
                     history=history, ema=ema)


def cfm_loss(model: FlowModel, data, rng: np.random.Generator, cond=None, reps: int = 1) -> float:
    """Monte Carlo value of the flow matching objective on held-out data."""
    Z = (np.atleast_2d(np.asarray(data, dtype=float).reshape(len(data), -1))
         - model.x_mean) / model.x_scale
    total = 0.0
    for _ in range(reps):
        x0 = rng.standard_normal(Z.shape)
        t = rng.uniform(0.0, T_MAX, size=len(Z))
        ps = linear_path(x0, Z, t)
        v = model.latent_velocity(t, ps.x_t, cond)
        total += float(np.mean(np.sum((v - ps.u) ** 2, axis=1)))
    return total / reps


def flow_to_json(model: FlowModel) -> str:
    doc = {
        "net": json.loads(mlp_to_json(model.net)),
        "dim": model.dim,
        "cond_dim": model.cond_dim,
        "x_mean": model.x_mean.tolist(),
        "x_scale": model.x_scale.tolist(),
        "c_mean": model.c_mean.tolist(),
        "c_scale": model.c_scale.tolist(),
        "sigma_path": model.sigma_path,
    }
    return json.dumps(doc)


def flow_from_json(text: str) -> FlowModel:
    doc = json.loads(text)
    arr = lambda k: np.asarray(doc[k], dtype=float)  # noqa: E731
    return FlowModel(mlp_from_json(json.dumps(doc["net"])), int(doc["dim"]), int(doc["cond_dim"]),
                     arr("x_mean"), arr("x_scale"), arr("c_mean"), arr("c_scale"),
                     float(doc["sigma_path"]))


def write_samples_csv(path, X, prefix: str = "x") -> None:
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{prefix}{j + 1}" for j in range(X.shape[1])])
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def write_trajectory_csv(path, ts, states) -> None:
    """One row per (time, path) with the state columns; ``states`` is (K+1, n, d)."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[:, :, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "path"] + [f"x{j + 1}" for j in range(states.shape[2])])
        for k, t in enumerate(ts):
            for i in range(states.shape[1]):
                w.writerow([repr(float(t)), i] + [repr(float(v)) for v in states[k, i]])


def read_samples_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))
