"""Experiment runners behind the command line.

Each runner takes validated parameters, a seed and an output directory,
writes CSV (and SVG) files there and returns a summary dict. Every
random draw comes from a stream derived from the seed, so reruns with the
same seed reproduce every non-timing output byte for byte.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, dgp
from .cfm import cfm_train, flow_from_json, flow_to_json, write_samples_csv
from .copula import (conditional_corr, copula_sample, field_grid, flow_copula_train, kendall_tau,
                     ks_uniform, ranks_to_pseudo)
from .diagnostics import (RbfKernel, ksd_wild_bootstrap, median_heuristic, qq_points, qte,
                          top_decile_gap, w1_1d)
from .errors import ConfigInvalid, ExperimentFailed, ScoreflowError
from .inference import (NuisanceSet, _logistic_predictor, aipw_score, ate_crossfit, linear_learner,
                        logistic_fit, orthogonality_contrast, semiparam_linreg_fit,
                        write_replications_csv)
from .missing import mar_mask, mi_pipeline, ols_analysis
from .mlp import TrainConfig, fit_regressor
from .numerics import rng_stream
from .ode import OdeConfig, sensitivity_ratio
from .paths import binned_variance, teacher_signal
from .scorematch import ggm_benchmark, quartic_score, quartic_sm_fit
from . import svg

SCHEMA_VERSION = 1


# ------------------------------------------------------------------ configuration

DEFAULTS: dict[str, dict] = {
    "ggm-bench": dict(d=200, n=120, reps=10, lam=0.2, rho=0.02, alpha=0.1, edge_prob=0.01,
                      iters=500, tol=1e-7),
    "quartic-sm": dict(n=50000),
    "cfm-train": dict(dgp="gaussian", n=5000, mean=2.0, sd=1.0, epochs=40, step_size=3e-3,
                      batch_size=128, hidden=[64, 64], coupling="independent",
                      spectral_cap=None, standardize=False, ema=None, samples=5000, steps=100),
    "cfm-sample": dict(model="model.json", n=5000, steps=100, scheme="rk4", trajectories=20),
    "coupling-compare": dict(n=4000, centre=2.0, sd=0.3, batch=64, n_batches=150, t_bins=10,
                             x_bins=12, x_lim=3.0, min_count=20, entropic_eps=0.05, epochs=20,
                             paths=40),
    "lipschitz-map": dict(n=2000, frac=0.05, radius=8.0, cap=1.0, epochs=30, step_size=3e-3,
                          grid=9, lim=3.0, delta=1e-3, probes=8, steps=50),
    "ksd-test": dict(n=200, d=2, B=300, reps=200, shift=1.0, alpha=0.05),
    "linreg-semipar": dict(n=400, reps=200, K=5, errors="exponential", beta=[0.5, 1.0, -1.0]),
    "copula-demo": dict(n=3000, noise=0.5, transform="probit", epochs=60, step_size=3e-3,
                        samples=3000, rho=0.5, grid=15),
    "mi-demo": dict(n=3000, K_imp=10, epochs=60, step_size=3e-3, sweeps=5),
    "ate-ddml": dict(n=1000, reps=200, K=5, design="randomized", dr_reps=200, dr_n=2000,
                     orth_n=100000),
    "causal-demo": dict(n=10000, m=40000, reg_epochs=60, flow_epochs=100, step_size=2e-3,
                        ema=0.999, flow_condition="arm", steps=40),
}

# parameters where zero is meaningful; every other integer must be positive
NONNEG = {"trajectories", "epochs", "paths", "dr_reps", "orth_n"}
CHOICES = {
    ("cfm-train", "dgp"): {"gaussian", "two-cluster", "outlier-2d", "copula-s"},
    ("cfm-train", "coupling"): {"independent", "assignment", "entropic"},
    ("cfm-sample", "scheme"): {"euler", "rk4"},
    ("linreg-semipar", "errors"): {"exponential", "gaussian"},
    ("copula-demo", "transform"): {"probit", "logit"},
    ("ate-ddml", "design"): {"randomized", "confounded"},
    ("causal-demo", "flow_condition"): {"arm", "arm+x"},
}


@dataclass
class ExperimentConfig:
    subcommand: str
    seed: int = 0
    out: str = "out"
    threads: int = 1
    params: dict = field(default_factory=dict)

    def echo(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed, "out": self.out,
                "threads": self.threads, **self.params}


def _check_value(sub: str, key: str, default, value):
    where = f"{sub}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{where} must be true or false")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{where} must be an integer")
        if value < 0 or (value == 0 and key not in NONNEG):
            raise ConfigInvalid(f"{where} must be positive")
    elif isinstance(default, float) or default is None:
        if value is None and default is None:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigInvalid(f"{where} must be a finite number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigInvalid(f"{where} must be a string")
        allowed = CHOICES.get((sub, key))
        if allowed is not None and value not in allowed:
            raise ConfigInvalid(f"{where} must be one of {sorted(allowed)}")
    elif isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigInvalid(f"{where} must be a non-empty list")
        kind = type(default[0])
        try:
            value = [kind(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigInvalid(f"{where} has bad entries") from None
        if kind is int and min(value) <= 0:
            raise ConfigInvalid(f"{where} entries must be positive")
    return value


def make_config(subcommand: str, doc: dict | None = None, seed: int | None = None,
                out: str | None = None, reps: int | None = None, threads: int | None = None
                ) -> ExperimentConfig:
    """Merge defaults, a JSON document and command-line overrides.

    Unknown keys, wrong types and non-positive counts raise ConfigInvalid.
    """
    if subcommand not in DEFAULTS:
        raise ConfigInvalid(f"unknown subcommand {subcommand!r}")
    if doc is not None and not isinstance(doc, dict):
        raise ConfigInvalid("config must be a JSON object")
    doc = dict(doc or {})
    named = doc.pop("subcommand", subcommand)
    if named != subcommand:
        raise ConfigInvalid(f"config is for {named!r}, not {subcommand!r}")
    base = DEFAULTS[subcommand]
    cfg = ExperimentConfig(subcommand, params=dict(base))
    for key in ("seed", "threads"):
        if key in doc:
            v = doc.pop(key)
            if isinstance(v, bool) or not isinstance(v, int) or v < (0 if key == "seed" else 1):
                raise ConfigInvalid(f"{key} must be a {'non-negative' if key == 'seed' else 'positive'} integer")
            setattr(cfg, key, v)
    if "out" in doc:
        v = doc.pop("out")
        if not isinstance(v, str) or not v:
            raise ConfigInvalid("out must be a non-empty path string")
        cfg.out = v
    unknown = sorted(set(doc) - set(base))
    if unknown:
        raise ConfigInvalid(f"unknown keys for {subcommand}: {unknown}")
    for k, v in doc.items():
        cfg.params[k] = _check_value(subcommand, k, base[k], v)
    if seed is not None:
        if seed < 0:
            raise ConfigInvalid("seed must be non-negative")
        cfg.seed = int(seed)
    if out is not None:
        cfg.out = out
    if threads is not None:
        if threads < 1:
            raise ConfigInvalid("threads must be positive")
        cfg.threads = int(threads)
    if reps is not None:
        if "reps" not in base:
            raise ConfigInvalid(f"{subcommand} has no replicate loop")
        cfg.params["reps"] = _check_value(subcommand, "reps", 1, reps)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigInvalid("config must be a JSON object")
    return doc


# ------------------------------------------------------------------ run plumbing

@dataclass
class RunManifest:
    subcommand: str
    config: dict
    timings: dict
    files: list
    summary: dict
    version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class _Ctx:
    """Output directory, stage timer and replicate fan-out for one run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.p = cfg.params
        self.dir = Path(cfg.out)
        self.files: list[str] = []
        self.timings: dict[str, float] = {}
        self._t = None

    def rng(self, stream: int) -> np.random.Generator:
        return rng_stream(self.cfg.seed, stream)

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.dir / name

    def stage(self, name: str):
        ctx = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                ctx.timings[name] = ctx.timings.get(name, 0.0) + time.perf_counter() - self.t0
                return False

        return _Stage()

    def map(self, fn: Callable, items):
        """Order-preserving map; replicates fan out when ``threads > 1``."""
        items = list(items)
        if self.cfg.threads <= 1 or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
            return list(pool.map(fn, items))

    def write_csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def plot(self, csv_name: str, svg_name: str, kind: str, **kw) -> None:
        svg.plot_csv(self.dir / csv_name, self.path(svg_name), kind, **kw)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def run(subcommand: str, config: ExperimentConfig | dict | None = None) -> RunManifest:
    """Execute one subcommand and write ``manifest.json`` next to its outputs."""
    cfg = config if isinstance(config, ExperimentConfig) else make_config(subcommand, config)
    if cfg.subcommand != subcommand:
        raise ConfigInvalid(f"config is for {cfg.subcommand!r}, not {subcommand!r}")
    runner = RUNNERS[subcommand]
    ctx = _Ctx(cfg)
    ctx.dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        summary = runner(ctx)
    except ConfigInvalid:
        raise
    except (ScoreflowError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise ExperimentFailed(f"{subcommand}: {type(exc).__name__}: {exc}") from exc
    ctx.timings["total"] = time.perf_counter() - t0
    ctx.path("summary.json")
    with open(ctx.dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    missing = [f for f in ctx.files if not (ctx.dir / f).exists()]
    if missing:
        raise ExperimentFailed(f"declared outputs were not written: {missing}")
    man = RunManifest(subcommand, cfg.echo(), {k: round(v, 6) for k, v in ctx.timings.items()},
                      list(ctx.files), _jsonable(summary))
    with open(ctx.dir / "manifest.json", "w", encoding="utf-8") as fh:
        fh.write(man.to_json() + "\n")
    return man


def _train_cfg(p: dict, **over) -> TrainConfig:
    kw = dict(step_size=p.get("step_size", 3e-3), epochs=p.get("epochs", 40),
              batch_size=p.get("batch_size", 128))
    kw.update(over)
    return TrainConfig(**kw)


# ------------------------------------------------------------------ score matching

def run_ggm_bench(ctx: _Ctx) -> dict:
    p = ctx.p

    def one(r):
        row = ggm_benchmark(p["d"], p["n"], 1, p["lam"], p["rho"], p["alpha"], ctx.rng(1000 + r),
                            iters=p["iters"], tol=p["tol"], edge_prob=p["edge_prob"])[0]
        row.rep = r
        return row

    with ctx.stage("benchmark"):
        rows = ctx.map(one, range(p["reps"]))
    ctx.write_csv("ggm_bench.csv", ["rep", "rmse_mle", "ct_mle_sec", "rmse_sm", "ct_sm_sec"],
                  [(r.rep, r.rmse_mle, r.ct_mle_sec, r.rmse_sm, r.ct_sm_sec) for r in rows])
    tab = []
    for name, rm, ct in (("MLE (graphical lasso)", "rmse_mle", "ct_mle_sec"),
                         ("SM (ridge-l1 score matching)", "rmse_sm", "ct_sm_sec")):
        a = np.array([getattr(r, rm) for r in rows])
        b = np.array([getattr(r, ct) for r in rows])
        tab.append((name, a.mean(), a.std(ddof=1) if len(a) > 1 else 0.0,
                    b.mean(), b.std(ddof=1) if len(b) > 1 else 0.0))
    ctx.write_csv("ggm_table.csv", ["method", "rmse_mean", "rmse_sd", "ct_mean_sec", "ct_sd_sec"], tab)
    return {
        "reps": len(rows),
        "rmse_sm_better": int(sum(r.rmse_sm < r.rmse_mle for r in rows)),
        "ct_sm_faster": int(sum(r.ct_sm_sec < r.ct_mle_sec for r in rows)),
        "rmse_mle_mean": tab[0][1], "rmse_sm_mean": tab[1][1],
    }


def run_quartic_sm(ctx: _Ctx) -> dict:
    x = ctx.rng(1).standard_normal(ctx.p["n"])
    with ctx.stage("fit"):
        th = quartic_sm_fit(x)
    vals = np.asarray(th, dtype=float)
    ctx.write_csv("theta_hat.csv", ["param", "value"],
                  [(f"theta{j + 1}", v) for j, v in enumerate(vals)])
    grid = np.linspace(-3, 3, 61)
    ctx.write_csv("score_curve.csv", ["x", "fitted_score", "reference_score"],
                  zip(grid, quartic_score(vals, grid), -grid))
    ctx.plot("score_curve.csv", "score_curve.svg", "line", x="x",
             ys=("fitted_score", "reference_score"), title="fitted vs reference score")
    return {"theta_hat": vals.tolist(), "reference": [0.0, -0.5, 0.0]}


# ------------------------------------------------------------------ flows

def _flow_data(p: dict, rng: np.random.Generator) -> np.ndarray:
    n = p["n"]
    if p["dgp"] == "gaussian":
        return (p["mean"] + p["sd"] * rng.standard_normal(n))[:, None]
    if p["dgp"] == "two-cluster":
        return dgp.two_cluster_1d(n, rng)[:, None]
    if p["dgp"] == "outlier-2d":
        return dgp.outlier_2d(n, rng)
    return dgp.copula_sign_switch(n, rng)


def run_cfm_train(ctx: _Ctx) -> dict:
    p = ctx.p
    data = _flow_data(p, ctx.rng(1))
    tc = TrainConfig(step_size=p["step_size"], epochs=p["epochs"], batch_size=p["batch_size"],
                     hidden=tuple(p["hidden"]), spectral_cap=p["spectral_cap"], seed=ctx.cfg.seed)
    hist: list = []
    with ctx.stage("train"):
        model = cfm_train(data, tc, ctx.rng(2), coupling=p["coupling"],
                          standardize=p["standardize"], history=hist, ema=p["ema"])
    with open(ctx.path("model.json"), "w", encoding="utf-8") as fh:
        fh.write(flow_to_json(model))
    ctx.write_csv("loss.csv", ["epoch", "loss"], [(i + 1, v) for i, v in enumerate(hist)])
    ctx.plot("loss.csv", "loss.svg", "line", x="epoch", ys=("loss",), title="training loss")
    write_samples_csv(ctx.path("train_data.csv"), data)
    with ctx.stage("sample"):
        gen = model.sample(p["samples"], ctx.rng(3), cfg=OdeConfig(p["steps"], "rk4"))
    write_samples_csv(ctx.path("samples.csv"), gen)
    out = {"final_loss": hist[-1] if hist else None, "lipschitz_bound": model.lipschitz_bound()}
    if data.shape[1] == 1:
        ref = _flow_data({**p, "n": p["samples"]}, ctx.rng(4))
        out["w1_to_fresh_target"] = w1_1d(gen[:, 0], ref[:, 0])
        _two_col_csv(ctx, "hist.csv", ("target", "generated"), ref[:, 0], gen[:, 0])
        ctx.plot("hist.csv", "hist.svg", "hist", ys=("target", "generated"), title="target vs generated")
    else:
        ctx.write_csv("scatter.csv", ["data_x1", "data_x2", "gen_x1", "gen_x2"],
                      np.hstack([data[:len(gen), :2], gen[:len(data), :2]]))
        ctx.plot("scatter.csv", "scatter.svg", "scatter",
                 ys=[("data", "data_x1", "data_x2"), ("generated", "gen_x1", "gen_x2")])
    return out


def _two_col_csv(ctx, name, labels, a, b):
    k = min(len(a), len(b))
    ctx.write_csv(name, list(labels), zip(a[:k], b[:k]))


def run_cfm_sample(ctx: _Ctx) -> dict:
    p = ctx.p
    try:
        with open(p["model"], encoding="utf-8") as fh:
            model = flow_from_json(fh.read())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read model {p['model']}: {exc}") from None
    if model.cond_dim:
        raise ConfigInvalid("cfm-sample draws from unconditional models only")
    ode = OdeConfig(p["steps"], p["scheme"])
    with ctx.stage("sample"):
        gen = model.sample(p["n"], ctx.rng(1), cfg=ode)
    write_samples_csv(ctx.path("samples.csv"), gen)
    out = {"n": p["n"], "mean": gen.mean(0).tolist(), "sd": gen.std(0).tolist()}
    if p["trajectories"]:
        ts, xs = model.push(ctx.rng(2).standard_normal((p["trajectories"], model.dim)),
                            cfg=ode, trajectory=True)
        cols = [f"path{i + 1}" for i in range(p["trajectories"])]
        ctx.write_csv("trajectories.csv", ["t"] + cols,
                      (np.concatenate([[t], xs[k, :, 0]]) for k, t in enumerate(ts)))
        ctx.plot("trajectories.csv", "trajectories.svg", "line", x="t", ys=cols,
                 title="flow trajectories (first coordinate)")
    return out


def coupling_bins(data, kinds, batch, n_batches, t_edges, x_edges, min_count, rng_for, eps):
    """Binned teacher-signal variance for each coupling kind on shared bins."""
    out = {}
    for i, kind in enumerate(kinds):
        t, x, u = teacher_signal(data, kind, rng_for(i), batch=batch, n_batches=n_batches, eps=eps)
        out[kind] = binned_variance(t, x, u, t_edges, x_edges, min_count)
    return out


def run_coupling_compare(ctx: _Ctx) -> dict:
    p = ctx.p
    data = dgp.two_cluster_1d(p["n"], ctx.rng(1), p["centre"], p["sd"])[:, None]
    t_edges = np.linspace(0.0, 1.0, p["t_bins"] + 1)
    x_edges = np.linspace(-p["x_lim"], p["x_lim"], p["x_bins"] + 1)
    kinds = ("independent", "assignment", "entropic")
    with ctx.stage("teacher_signal"):
        var = coupling_bins(data, kinds, p["batch"], p["n_batches"], t_edges, x_edges,
                            p["min_count"], lambda i: ctx.rng(10 + i), p["entropic_eps"])
    rows = []
    for a in range(p["t_bins"]):
        for b in range(p["x_bins"]):
            vi = var["independent"][a, b]
            if not np.isfinite(vi):
                continue
            rows.append((t_edges[a], t_edges[a + 1], x_edges[b], x_edges[b + 1],
                         vi, var["assignment"][a, b], var["entropic"][a, b]))
    ctx.write_csv("coupling_bins.csv", ["t_lo", "t_hi", "x_lo", "x_hi", "var_independent",
                                        "var_assignment", "var_entropic"], rows)
    R = np.array([r[4:] for r in rows], dtype=float).reshape(-1, 3)

    def frac_lower(j):
        ok = np.isfinite(R[:, j])
        return float(np.mean(R[ok, j] < R[ok, 0])) if ok.any() else float("nan")

    out = {"occupied_bins": len(rows), "frac_lower_assignment": frac_lower(1),
           "frac_lower_entropic": frac_lower(2)}
    if p["epochs"]:
        z0 = ctx.rng(20).standard_normal((p["paths"], 1))
        traj = {}
        for i, kind in enumerate(("independent", "assignment")):
            with ctx.stage(f"train_{kind}"):
                m = cfm_train(data, TrainConfig(step_size=3e-3, epochs=p["epochs"], batch_size=p["batch"]),
                              ctx.rng(30 + i), coupling=kind)
            ts, xs = m.push(z0, cfg=OdeConfig(50, "rk4"), trajectory=True)
            traj[kind] = xs[:, :, 0]
            # total path length over total endpoint displacement, minus one (zero if straight)
            length = np.abs(np.diff(xs[:, :, 0], axis=0)).sum()
            disp = np.abs(xs[-1, :, 0] - xs[0, :, 0]).sum()
            out[f"excess_path_length_{kind}"] = float(length / max(disp, 1e-12) - 1.0)
            cols = [f"path{j + 1}" for j in range(p["paths"])]
            ctx.write_csv(f"trajectories_{kind}.csv", ["t"] + cols,
                          (np.concatenate([[t], traj[kind][k]]) for k, t in enumerate(ts)))
            ctx.plot(f"trajectories_{kind}.csv", f"trajectories_{kind}.svg", "line", x="t", ys=cols,
                     title=f"{kind} coupling")
    return out


def run_lipschitz_map(ctx: _Ctx) -> dict:
    p = ctx.p
    data = dgp.outlier_2d(p["n"], ctx.rng(1), p["frac"], p["radius"])
    models = {}
    for i, (name, cap) in enumerate((("unclamped", None), ("clamped", p["cap"]))):
        tc = TrainConfig(step_size=p["step_size"], epochs=p["epochs"], batch_size=128,
                         spectral_cap=cap)
        with ctx.stage(f"train_{name}"):
            models[name] = cfm_train(data, tc, ctx.rng(10 + i))
    g = np.linspace(-p["lim"], p["lim"], p["grid"])
    pts = np.array([(a, b) for a in g for b in g])
    ode = OdeConfig(p["steps"], "rk4")
    ratios = {}
    with ctx.stage("sensitivity"):
        for i, (name, m) in enumerate(models.items()):
            rng = ctx.rng(20 + i)
            ratios[name] = np.array([sensitivity_ratio(m.field(), x, p["delta"], ode, p["probes"], rng)
                                     for x in pts])
    ctx.write_csv("sensitivity_grid.csv", ["x1", "x2", "ratio_unclamped", "ratio_clamped"],
                  np.column_stack([pts, ratios["unclamped"], ratios["clamped"]]))
    ctx.plot("sensitivity_grid.csv", "sensitivity_hist.svg", "hist",
             ys=("ratio_unclamped", "ratio_clamped"), title="sensitivity ratios on the grid")
    L = models["clamped"].lipschitz_bound()
    return {
        "lipschitz_bound_clamped": L,
        "lipschitz_bound_unclamped": models["unclamped"].lipschitz_bound(),
        "gronwall_bound_clamped": math.exp(L),
        "max_ratio_clamped": float(ratios["clamped"].max()),
        "max_ratio_unclamped": float(ratios["unclamped"].max()),
    }


# ------------------------------------------------------------------ diagnostics

def run_ksd_test(ctx: _Ctx) -> dict:
    p = ctx.p
    score = lambda X: -X  # noqa: E731  standard normal model

    def one(job):
        hyp, r = job
        rng = ctx.rng(1000 * (1 + hyp) + r)
        X = rng.standard_normal((p["n"], p["d"]))
        if hyp:
            X[:, 0] += p["shift"]
        res = ksd_wild_bootstrap(X, score, None, p["B"], rng)
        return (r, "alternative" if hyp else "null", res.statistic, res.p_value, res.bandwidth,
                res.p_value <= p["alpha"])

    with ctx.stage("replicates"):
        rows = ctx.map(one, [(h, r) for h in (0, 1) for r in range(p["reps"])])
    ctx.write_csv("ksd_reps.csv", ["rep", "hypothesis", "statistic", "p_value", "bandwidth", "reject"], rows)
    # bandwidth sensitivity on one alternative sample
    rng = ctx.rng(5)
    X = rng.standard_normal((p["n"], p["d"]))
    X[:, 0] += p["shift"]
    h0 = median_heuristic(X)
    bw = []
    for mult in (0.25, 0.5, 1.0, 2.0, 4.0):
        res = ksd_wild_bootstrap(X, score, RbfKernel(h0 * mult), p["B"], ctx.rng(6))
        bw.append((mult, h0 * mult, res.statistic, res.p_value))
    ctx.write_csv("ksd_bandwidth.csv", ["multiplier", "bandwidth", "statistic", "p_value"], bw)
    rej = np.array([r[5] for r in rows], dtype=bool)
    hyp = np.array([r[1] for r in rows])
    return {"level": float(rej[hyp == "null"].mean()), "power": float(rej[hyp == "alternative"].mean()),
            "reps": p["reps"], "alpha": p["alpha"]}


# ------------------------------------------------------------------ inference

def run_linreg_semipar(ctx: _Ctx) -> dict:
    p = ctx.p
    beta = np.asarray(p["beta"], dtype=float)
    q = beta.size - 1

    def one(r):
        rng = ctx.rng(100 + r)
        X = rng.standard_normal((p["n"], q))
        e = (rng.exponential(size=p["n"]) - 1.0 if p["errors"] == "exponential"
             else rng.standard_normal(p["n"]))
        y = beta[0] + X @ beta[1:] + e
        fit = semiparam_linreg_fit(X, y, p["K"], rng)
        ols = np.linalg.lstsq(np.column_stack([np.ones(p["n"]), X]), y, rcond=None)[0]
        return [r] + list(fit.beta) + list(ols)

    with ctx.stage("replicates"):
        rows = ctx.map(one, range(p["reps"]))
    names = [f"b{j}" for j in range(q + 1)]
    ctx.write_csv("linreg_reps.csv", ["rep"] + [f"semipar_{c}" for c in names] + [f"ols_{c}" for c in names], rows)
    A = np.array([r[1:] for r in rows], dtype=float)
    sp, ol = A[:, :q + 1], A[:, q + 1:]
    mse_sp = float(np.mean(np.sum((sp - beta) ** 2, axis=1)))
    mse_ol = float(np.mean(np.sum((ol - beta) ** 2, axis=1)))
    # Gaussian moments make the efficient score the OLS score
    rng = ctx.rng(7)
    X = rng.standard_normal((p["n"], q))
    y = beta[0] + X @ beta[1:] + rng.exponential(size=p["n"]) - 1.0
    fix = semiparam_linreg_fit(X, y, p["K"], rng, moments=(0.0, 3.0))
    ols = np.linalg.lstsq(np.column_stack([np.ones(p["n"]), X]), y, rcond=None)[0]
    return {"mse_semipar": mse_sp, "mse_ols": mse_ol, "errors": p["errors"],
            "gaussian_moments_max_abs_diff_vs_ols": float(np.max(np.abs(fix.beta - ols)))}


def dr_bias_check(n: int, reps: int, rng_for: Callable) -> list[dict]:
    """AIPW bias on the confounded design with one nuisance deliberately wrong."""
    cases = {
        "both_correct": (dgp.confounded_mu0, dgp.confounded_mu1, dgp.confounded_e),
        "wrong_propensity": (dgp.confounded_mu0, dgp.confounded_mu1, lambda X: np.full(len(X), 0.5)),
        "wrong_outcome": (lambda X: np.zeros(len(X)), lambda X: np.zeros(len(X)), dgp.confounded_e),
        "both_wrong": (lambda X: np.zeros(len(X)), lambda X: np.zeros(len(X)),
                       lambda X: np.full(len(X), 0.5)),
    }
    est = {k: [] for k in cases}
    for r in range(reps):
        d = dgp.confounded_design(n, rng_for(r))
        for k, (m0, m1, e) in cases.items():
            est[k].append(float(np.mean(aipw_score(d.X, d.A, d.Y, 0.0, NuisanceSet(m0, m1, e)))))
    out = []
    for k, v in est.items():
        v = np.asarray(v)
        bias = float(v.mean() - 1.0)
        mcse = float(v.std(ddof=1) / math.sqrt(len(v)))
        out.append({"case": k, "bias": bias, "mc_se": mcse, "within_3se": abs(bias) <= 3 * mcse})
    return out


def run_ate_ddml(ctx: _Ctx) -> dict:
    p = ctx.p
    truth = 1.0

    def one(r):
        rng = ctx.rng(100 + r)
        d = (dgp.randomized_design(p["n"], rng) if p["design"] == "randomized"
             else dgp.confounded_design(p["n"], rng))
        rep = ate_crossfit(d.X, d.A, d.Y, p["K"], linear_learner, rng=rng)
        return {"rep": r, "psi_hat": rep.psi, "se": rep.se, "lo": rep.ci95[0], "hi": rep.ci95[1],
                "covered": int(rep.covers(truth))}

    with ctx.stage("replicates"):
        rows = ctx.map(one, range(p["reps"]))
    write_replications_csv(ctx.path("ate_reps.csv"), rows)
    psi = np.array([r["psi_hat"] for r in rows])
    out = {"design": p["design"], "truth": truth, "coverage": float(np.mean([r["covered"] for r in rows])),
           "mean_psi": float(psi.mean()), "sd_psi": float(psi.std(ddof=1)) if len(psi) > 1 else 0.0,
           "mean_se": float(np.mean([r["se"] for r in rows]))}
    if p["dr_reps"]:
        with ctx.stage("double_robustness"):
            dr = dr_bias_check(p["dr_n"], p["dr_reps"], lambda r: ctx.rng(10000 + r))
        ctx.write_csv("dr_check.csv", ["case", "bias", "mc_se", "within_3se"],
                      [(c["case"], c["bias"], c["mc_se"], c["within_3se"]) for c in dr])
        out["double_robustness"] = dr
    if p["orth_n"]:
        with ctx.stage("orthogonality"):
            d = dgp.confounded_design(p["orth_n"], ctx.rng(20000))
            orth = orthogonality_contrast(d.X, d.A, d.Y, dgp.confounded_mu0, dgp.confounded_mu1,
                                          dgp.confounded_e, 1.0)
        ctx.write_csv("orthogonality.csv", ["direction", "slope_aipw", "slope_naive", "ratio"],
                      [(o["direction"], o["slope_aipw"], o["slope_naive"], o["ratio"]) for o in orth])
        out["orthogonality"] = orth
    return out


# ------------------------------------------------------------------ copula, imputation

def run_copula_demo(ctx: _Ctx) -> dict:
    p = ctx.p
    X = dgp.copula_sign_switch(p["n"], ctx.rng(1), p["noise"])
    U = ranks_to_pseudo(X).U
    tc = TrainConfig(step_size=p["step_size"], epochs=p["epochs"], batch_size=128)
    with ctx.stage("train"):
        m = flow_copula_train(X, p["transform"], tc, ctx.rng(2))
    with ctx.stage("sample"):
        G = copula_sample(m, p["samples"], ctx.rng(3))
    k = min(len(U), len(G))
    ctx.write_csv("copula_scatter.csv", ["data_u1", "data_u2", "gen_u1", "gen_u2"],
                  np.hstack([U[:k], G[:k]]))
    ctx.plot("copula_scatter.csv", "copula_scatter.svg", "scatter",
             ys=[("data", "data_u1", "data_u2"), ("generated", "gen_u1", "gen_u2")],
             title="pseudo-observations vs flow draws")
    F = field_grid(m, 0.5, p["grid"])
    ctx.write_csv("field_grid.csv", ["z1", "z2", "v1", "v2"], F)
    ctx.plot("field_grid.csv", "field_grid.svg", "quiver", ys=("z1", "z2", "v1", "v2"),
             title="velocity field at t = 0.5")
    Gp = ranks_to_pseudo(dgp.gaussian_pair(p["n"], p["rho"], ctx.rng(4))).U
    return {
        "ks_u1": ks_uniform(G[:, 0]), "ks_u2": ks_uniform(G[:, 1]),
        "corr_lower_data": conditional_corr(U, 0.0, 0.5), "corr_upper_data": conditional_corr(U, 0.5, 1.0),
        "corr_lower_gen": conditional_corr(G, 0.0, 0.5), "corr_upper_gen": conditional_corr(G, 0.5, 1.0),
        "kendall_tau_data": kendall_tau(U), "kendall_tau_gen": kendall_tau(G),
        "gaussian_reference_tau": kendall_tau(Gp),
        "gaussian_closed_form_tau": 2.0 / math.pi * math.asin(p["rho"]),
    }


def _std_analysis(completed):
    return ols_analysis(completed[:, :3], completed[:, 3], standardize=True)


def run_mi_demo(ctx: _Ctx) -> dict:
    p = ctx.p
    data = dgp.mi_bimodal(p["n"], ctx.rng(1))
    w0 = dgp.mi_mask_intercept()
    md = mar_mask(data.X, 2, {0: dgp.MI_MASK_W[0], 1: dgp.MI_MASK_W[1]}, w0, ctx.rng(2))
    miss = md.M[:, 2]
    truth = np.concatenate([[0.0], dgp.MI_BETA_STD])
    tc = TrainConfig(step_size=p["step_size"], epochs=p["epochs"], batch_size=128)
    res, imps = {}, {}
    for i, engine in enumerate(("flow", "chained")):
        with ctx.stage(engine):
            rr, comp = mi_pipeline(md, 2, engine, p["K_imp"], _std_analysis, ctx.rng(10 + i), cfg=tc,
                                   sweeps=p["sweeps"], return_imputations=True)
        res[engine] = rr
        imps[engine] = np.concatenate([c[miss, 2] for c in comp])
    terms = ["intercept", "X1", "X2", "X3"]
    rows = []
    for engine, rr in res.items():
        for j, t in enumerate(terms):
            rows.append((engine, t, rr.theta[j], rr.se[j], truth[j], (rr.theta[j] - truth[j]) / rr.se[j]))
    ctx.write_csv("mi_table.csv", ["engine", "term", "estimate", "se", "truth", "z"], rows)
    true_missing = data.X[miss, 2]
    x1_rep = np.tile(data.X[miss, 0], p["K_imp"])
    K = p["K_imp"]
    ctx.write_csv("mi_imputed.csv", ["x1", "x3_true", "x3_flow", "x3_chained"],
                  np.column_stack([x1_rep, np.tile(true_missing, K), imps["flow"], imps["chained"]]))
    ctx.plot("mi_imputed.csv", "mi_imputed.svg", "hist", ys=("x3_true", "x3_flow", "x3_chained"),
             title="X3 in the masked rows")
    out = {"missing_rate": float(miss.mean()), "mask_intercept": w0}
    out["mode_fractions_true"] = list(dgp.mi_mode_fractions(data.X[miss, 0], true_missing))
    for engine in res:
        out[f"w1_{engine}"] = w1_1d(imps[engine], true_missing)
        out[f"mode_fractions_{engine}"] = list(dgp.mi_mode_fractions(x1_rep, imps[engine]))
        out[f"max_abs_z_{engine}"] = float(max(abs(r[5]) for r in rows if r[0] == engine))
    return out


# ------------------------------------------------------------------ causal demo

@dataclass
class LocationScale:
    """Per-arm mean and log-scale regressions fitted with the approximator."""

    mu: dict
    scale: dict

    def standardized_residuals(self, X, A, Y) -> np.ndarray:
        r = np.empty(len(Y))
        for a in (0, 1):
            s = A == a
            r[s] = (Y[s] - self.mu[a](X[s])) / self.scale[a](X[s])
        return r


def fit_location_scale(X, A, Y, cfg: TrainConfig, rng: np.random.Generator) -> LocationScale:
    mu, sc = {}, {}
    for a in (0, 1):
        s = A == a
        mu[a] = fit_regressor(X[s], Y[s], cfg, rng)
        r = Y[s] - mu[a](X[s])
        ls = fit_regressor(X[s], np.log(r * r + 1e-8), cfg, rng)
        sc[a] = lambda Z, ls=ls: np.exp(0.5 * ls(Z))
    return LocationScale(mu, sc)


def causal_samplers(d: dgp.CausalData, p: dict, rng_for: Callable):
    """Fit the baseline and the flow sampler; return two ``(a, X, rng) -> draws`` callables.

    Both share the location-scale fit. The baseline resamples the pooled
    standardized residuals; the flow learns the standardized-residual law
    conditional on the arm (``flow_condition="arm"``) or on ``(a, X)``.
    """
    rc = TrainConfig(step_size=3e-3, epochs=p["reg_epochs"], batch_size=128, weight_decay=1e-4)
    ls = fit_location_scale(d.X, d.A, d.Y, rc, rng_for(1))
    res = ls.standardized_residuals(d.X, d.A, d.Y)
    with_x = p["flow_condition"] == "arm+x"
    C = np.column_stack([d.A, d.X]) if with_x else d.A[:, None].astype(float)
    fc = TrainConfig(step_size=p["step_size"], epochs=p["flow_epochs"], batch_size=128)
    flow = cfm_train(res[:, None], fc, rng_for(2), cond=C, standardize=True, ema=p["ema"])
    ode = OdeConfig(p["steps"], "rk4")

    def baseline(a, X, rng):
        return ls.mu[a](X) + ls.scale[a](X) * res[rng.integers(0, len(res), len(X))]

    def flow_sampler(a, X, rng):
        Cc = np.column_stack([np.full(len(X), a), X]) if with_x else np.full((len(X), 1), float(a))
        z = flow.sample(len(X), rng, cond=Cc, cfg=ode)[:, 0]
        return ls.mu[a](X) + ls.scale[a](X) * z

    return ls, baseline, flow_sampler


def run_causal_demo(ctx: _Ctx) -> dict:
    p = ctx.p
    d = dgp.causal_observational(p["n"], ctx.rng(1))
    with ctx.stage("fit"):
        ls, base, flow = causal_samplers(d, p, lambda i: ctx.rng(10 + i))
    m = p["m"]
    truth = {a: dgp.causal_interventional(m, a, ctx.rng(20 + a)) for a in (0, 1)}
    Xs = d.X[ctx.rng(3).integers(0, p["n"], m)]
    with ctx.stage("sample"):
        draws = {"baseline": {a: base(a, Xs, ctx.rng(30 + a)) for a in (0, 1)},
                 "flow": {a: flow(a, Xs, ctx.rng(40 + a)) for a in (0, 1)}}
    # yardstick for "within k SE": AIPW standard error with the fitted regressions
    e = logistic_fit(d.X, d.A)
    ns = NuisanceSet(ls.mu[0], ls.mu[1], _logistic_predictor(e))
    phi = aipw_score(d.X, d.A, d.Y, 0.0, ns)
    se = float(np.std(phi, ddof=1) / math.sqrt(len(phi)))
    rows, out = [], {"ate_true": dgp.CAUSAL_ATE, "ate_se": se, "aipw_ate": float(phi.mean())}
    sets = {"truth": truth, **draws}
    for name, s in sets.items():
        ate = float(s[1].mean() - s[0].mean())
        q = [qte(s[1], s[0], a) for a in (0.1, 0.5, 0.9)]
        w = [w1_1d(s[a], truth[a]) if name != "truth" else 0.0 for a in (0, 1)]
        rows.append((name, ate, *q, *w))
        if name != "truth":
            out[f"ate_{name}"] = ate
            out[f"w1_do0_{name}"], out[f"w1_do1_{name}"] = w
            out[f"top_decile_gap_{name}"] = top_decile_gap(truth[1], s[1])
        else:
            out["qte_true"] = q
    ctx.write_csv("causal_summary.csv", ["method", "ate", "qte10", "qte50", "qte90", "w1_do0", "w1_do1"], rows)
    for a in (0, 1):
        qb = qq_points(truth[a], draws["baseline"][a])
        qf = qq_points(truth[a], draws["flow"][a])
        pr = (np.arange(1, 100) - 0.5) / 99
        ctx.write_csv(f"qq_do{a}.csv", ["p", "q_truth", "q_baseline", "q_flow"],
                      np.column_stack([pr, qb[:, 0], qb[:, 1], qf[:, 1]]))
        ctx.plot(f"qq_do{a}.csv", f"qq_do{a}.svg", "qq", x="q_truth", ys=("q_baseline", "q_flow"),
                 title=f"QQ under do(A={a})")
    return out


RUNNERS: dict[str, Callable[[_Ctx], dict]] = {
    "ggm-bench": run_ggm_bench,
    "quartic-sm": run_quartic_sm,
    "cfm-train": run_cfm_train,
    "cfm-sample": run_cfm_sample,
    "coupling-compare": run_coupling_compare,
    "lipschitz-map": run_lipschitz_map,
    "ksd-test": run_ksd_test,
    "linreg-semipar": run_linreg_semipar,
    "copula-demo": run_copula_demo,
    "mi-demo": run_mi_demo,
    "ate-ddml": run_ate_ddml,
    "causal-demo": run_causal_demo,
}
