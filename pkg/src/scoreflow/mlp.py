"""Small feed-forward regressor with hand-written backpropagation.

The same network class backs velocity fields, denoising score models and the
nuisance regressions used for causal inference. Weights are stored as
``(fan_in, fan_out)`` arrays so a batch ``X`` of shape ``(n, fan_in)`` maps
through ``X @ W + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, Divergence, EmptyBatch

ACTIVATIONS = ("tanh", "smooth-relu")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "smooth-relu":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown activation {name!r}")


def _act_deriv(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "smooth-relu":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise DimensionMismatch("layer count does not match sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (self.sizes[k + 1],):
                raise DimensionMismatch(f"layer {k} has incompatible shapes")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        return Mlp(list(self.sizes), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.activation)

    def __call__(self, x):
        return forward(self, x)

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_params(self, theta: np.ndarray) -> "Mlp":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise DimensionMismatch("parameter vector has the wrong length")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(theta[pos:pos + b.size].copy())
            pos += b.size
        return Mlp(list(self.sizes), ws, bs, self.activation)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator,
             activation: str = "tanh") -> Mlp:
    """Glorot-uniform weights and zero biases."""
    sizes = [int(s) for s in sizes]
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return Mlp(sizes, ws, bs, activation)


def _as_batch(m: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != m.sizes[0]:
        raise DimensionMismatch(f"input has {x.shape[1]} features, network expects {m.sizes[0]}")
    return x, single


def forward(m: Mlp, x) -> np.ndarray:
    """Evaluate the network; the output layer is affine (no activation)."""
    h, single = _as_batch(m, x)
    last = m.n_layers - 1
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w + b
        if k < last:
            h = _act(m.activation, h)
    return h[0] if single else h


def input_jacobian(m: Mlp, x) -> np.ndarray:
    """Jacobian of the output with respect to the input, shape ``(n, out, in)``."""
    h, _ = _as_batch(m, x)
    jac = np.broadcast_to(np.eye(m.sizes[0]), (h.shape[0], m.sizes[0], m.sizes[0]))
    last = m.n_layers - 1
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        jac = jac @ w  # (n, in, out_k) in transposed layout
        if k < last:
            h = _act(m.activation, z)
            jac = jac * _act_deriv(m.activation, z, h)[:, None, :]
        else:
            h = z
    return np.transpose(jac, (0, 2, 1))


def loss_grad(m: Mlp, x, y, weight_decay: float = 0.0,
              sample_weight=None) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared error and its gradient with respect to every parameter.

    The loss is ``mean_i ||f(x_i) - y_i||^2 + weight_decay * sum ||W||_F^2``;
    biases are not decayed. Returns ``(loss, weight_grads, bias_grads)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if y.ndim == 1:
        y = y[:, None] if m.sizes[-1] == 1 and y.shape[0] == x.shape[0] else y[None, :]
    n = x.shape[0]
    if n == 0:
        raise EmptyBatch("loss_grad needs at least one sample")
    if x.shape[1] != m.sizes[0] or y.shape != (n, m.sizes[-1]):
        raise DimensionMismatch("batch shapes do not match the network")

    hs = [x]
    zs = []
    last = m.n_layers - 1
    h = x
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        zs.append(z)
        h = _act(m.activation, z) if k < last else z
        hs.append(h)

    resid = hs[-1] - y
    if sample_weight is None:
        wts = np.full(n, 1.0 / n)
    else:
        wts = np.asarray(sample_weight, dtype=float) / n
    loss = float(np.sum(wts * np.sum(resid * resid, axis=1)))
    delta = 2.0 * resid * wts[:, None]

    gws: list[np.ndarray] = [None] * m.n_layers  # type: ignore[list-item]
    gbs: list[np.ndarray] = [None] * m.n_layers  # type: ignore[list-item]
    for k in range(last, -1, -1):
        gws[k] = hs[k].T @ delta
        gbs[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ m.weights[k].T) * _act_deriv(m.activation, zs[k - 1], hs[k])
    if weight_decay:
        for k, w in enumerate(m.weights):
            loss += weight_decay * float(np.sum(w * w))
            gws[k] = gws[k] + 2.0 * weight_decay * w
    return loss, gws, gbs


def flat_grad(m: Mlp, x, y, weight_decay: float = 0.0) -> tuple[float, np.ndarray]:
    """Same as :func:`loss_grad` with the gradient packed like ``get_params``."""
    loss, gws, gbs = loss_grad(m, x, y, weight_decay)
    parts = []
    for gw, gb in zip(gws, gbs):
        parts.append(gw.ravel())
        parts.append(gb.ravel())
    return loss, np.concatenate(parts)


class Adam:
    """Per-parameter adaptive step with bias-corrected moment estimates."""

    def __init__(self, m: Mlp, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.mw = [np.zeros_like(w) for w in m.weights]
        self.vw = [np.zeros_like(w) for w in m.weights]
        self.mb = [np.zeros_like(b) for b in m.biases]
        self.vb = [np.zeros_like(b) for b in m.biases]

    def step(self, m: Mlp, gws, gbs, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for params, grads, ms, vs in ((m.weights, gws, self.mw, self.vw),
                                      (m.biases, gbs, self.mb, self.vb)):
            for p, g, mo, ve in zip(params, grads, ms, vs):
                mo *= self.beta1
                mo += (1.0 - self.beta1) * g
                ve *= self.beta2
                ve += (1.0 - self.beta2) * g * g
                p -= lr * (mo / c1) / (np.sqrt(ve / c2) + self.eps)


@dataclass
class TrainConfig:
    step_size: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    weight_decay: float = 0.0
    spectral_cap: float | None = None
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    cosine: bool = True
    min_lr_frac: float = 0.05

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("epochs and weight_decay must be non-negative")
        if self.spectral_cap is not None and not self.spectral_cap > 0:
            raise ValueError("spectral_cap must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    def lr_at(self, step: int, total: int) -> float:
        if not self.cosine or total <= 1:
            return self.step_size
        frac = min(step / (total - 1), 1.0)
        scale = self.min_lr_frac + (1.0 - self.min_lr_frac) * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.step_size * scale


def train(x, y, cfg: TrainConfig, rng: np.random.Generator, init: Mlp | None = None,
          history: list | None = None) -> Mlp:
    """Minibatch Adam on the squared-error loss.

    ``history`` (if given) receives the mean training loss of every epoch.
    Raises Divergence as soon as a loss turns non-finite.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n = x.shape[0]
    if n == 0:
        raise EmptyBatch("no training data")
    m = init.copy() if init is not None else init_mlp(
        [x.shape[1], *cfg.hidden, y.shape[1]], rng, cfg.activation)
    opt = Adam(m, cfg.step_size)
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = per_epoch * cfg.epochs
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        acc = 0.0
        for s in range(per_epoch):
            idx = order[s * bs:(s + 1) * bs]
            loss, gws, gbs = loss_grad(m, x[idx], y[idx], cfg.weight_decay)
            if not math.isfinite(loss):
                raise Divergence(f"loss became {loss} at step {step}")
            opt.step(m, gws, gbs, cfg.lr_at(step, total))
            if cfg.spectral_cap is not None:
                _clamp_inplace(m, cfg.spectral_cap)
            acc += loss * len(idx)
            step += 1
        if history is not None:
            history.append(acc / n)
    return m


def layer_norms(m: Mlp) -> list[float]:
    return [float(np.linalg.norm(w, 2)) for w in m.weights]


def activation_lipschitz(name: str) -> float:
    return 1.0  # tanh' and softplus' are both bounded by 1


def lipschitz_upper_bound(m: Mlp) -> float:
    """Product of layer operator norms times ``Lip(activation)**(L-1)``."""
    return float(np.prod(layer_norms(m))) * activation_lipschitz(m.activation) ** (m.n_layers - 1)


def _clamp_inplace(m: Mlp, cap: float) -> None:
    for k, w in enumerate(m.weights):
        s = np.linalg.norm(w, 2)
        if s > cap:
            m.weights[k] = w * (cap / s)


def spectral_clamp(m: Mlp, cap: float) -> Mlp:
    """Rescale every layer whose operator norm exceeds ``cap`` down to ``cap``."""
    if not cap > 0:
        raise ValueError("cap must be positive")
    out = m.copy()
    _clamp_inplace(out, cap)
    return out


def to_json(m: Mlp) -> str:
    doc = {
        "sizes": list(m.sizes),
        "activation": m.activation,
        "weights": [w.ravel().tolist() for w in m.weights],
        "biases": [b.tolist() for b in m.biases],
    }
    return json.dumps(doc)


def from_json(text: str) -> Mlp:
    doc = json.loads(text)
    sizes = [int(s) for s in doc["sizes"]]
    ws = [np.asarray(w, dtype=float).reshape(sizes[k], sizes[k + 1])
          for k, w in enumerate(doc["weights"])]
    bs = [np.asarray(b, dtype=float) for b in doc["biases"]]
    return Mlp(sizes, ws, bs, doc["activation"])


def fit_regressor(x, y, cfg: TrainConfig, rng: np.random.Generator) -> Callable:
    """Train on standardized inputs/targets and return a predict function."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    squeeze = y.ndim == 1
    y2 = y[:, None] if squeeze else y
    xm, xs = x.mean(0), x.std(0) + 1e-12
    ym, ys = y2.mean(0), y2.std(0) + 1e-12
    net = train((x - xm) / xs, (y2 - ym) / ys, cfg, rng)

    def predict(xnew):
        xnew = np.asarray(xnew, dtype=float)
        if xnew.ndim == 1:
            xnew = xnew[:, None]
        out = forward(net, (xnew - xm) / xs) * ys + ym
        return out[:, 0] if squeeze else out

    predict.net = net  # type: ignore[attr-defined]
    return predict
