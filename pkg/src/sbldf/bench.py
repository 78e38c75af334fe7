"""Synthetic experiment harness: configs, per-trial workers, CSV tables."""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .em import EmOptions, solve_em
from .fml import FmlOptions, solve_fml
from .model import (
    HyperPriors,
    NumericalFailure,
    Prediction,
    is_success,
    map_prediction_to_hyperpriors,
    rmse,
)
from .rwl1 import RwlOptions, solve_rwl1
from .synth import (
    DictModel,
    SignalModel,
    corrupt_prediction,
    gen_dictionary,
    gen_sparse_signal,
    gen_tracking,
    measure,
    trial_seed,
)
from .tracker import DynamicsModel, TrackerConfig, sbl_df_run

EXPERIMENTS = ("measurements", "coherence", "tracking", "runtime")

ROW_FIELDS = (
    "experiment",
    "trial",
    "seed",
    "n",
    "m",
    "s",
    "sigma_obs2",
    "sigma_dyn2",
    "support_errors",
    "structure_c",
    "xi",
    "solver",
    "t",
    "rmse",
    "success",
    "iters",
    "actions",
    "wall_ms",
    "converged",
)
TIMING_FIELDS = ("wall_ms", "iter_ms")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _floats(v):
    return [float(x) for x in v]


@dataclass
class ExperimentConfig:
    """Flat experiment description; list-valued keys are comma separated in files.

    ``levels`` entries are ``swaps:sigma_dyn2`` pairs (prediction corruption
    levels for the measurement sweep). ``xi_grid`` is ``start:stop:step`` in
    log10 units. ``sweep`` picks the axis of the coherence experiment
    (``sigma_obs2`` or ``structure_c``).
    """

    experiment: str = "measurements"
    n: int = 512
    s: int = 16
    m_values: list = field(default_factory=lambda: [64, 96, 128, 160])
    n_values: list = field(default_factory=lambda: [512, 1024, 2048, 4096, 8192, 16384])
    m_ratio: float = 0.25
    sigma_obs2: list = field(default_factory=lambda: [1e-3])
    levels: list = field(default_factory=lambda: [(0, 1e-4)])
    swap_prob: float = 0.1
    sigma_dyn2: float = 1e-4
    structure_c: list = field(default_factory=lambda: [None])
    dict_kind: str = "iid"
    signal_kind: str = "gaussian_nonzeros"
    sweep: str = "sigma_obs2"
    xi_grid: tuple = (-2.0, 2.0, 0.1)
    xi: float = 1.0
    trials: int = 240
    solver: str = "fml"
    lam: float = 1e-3
    learn_lambda: bool = False
    tau: float = 0.1
    tau_em: float = 1e-4
    tau_fml: float = 0.1
    tol: float = 1e-4
    max_iters: int = 2000
    steps: int = 30
    seed: int = 0

    @classmethod
    def defaults(cls, experiment: str) -> "ExperimentConfig":
        if experiment == "measurements":
            return cls(experiment=experiment)
        if experiment == "coherence":
            return cls(
                experiment=experiment,
                n=100,
                s=25,
                m_values=[42],
                sigma_obs2=[1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
                dict_kind="local_coherent_scaled",
                solver="em",
                tau=1e-4,
                learn_lambda=True,
                trials=20,
            )
        if experiment == "tracking":
            return cls(
                experiment=experiment,
                n=100,
                s=25,
                m_values=[42],
                sigma_obs2=[1e-6],
                dict_kind="local_coherent_scaled",
                solver="em",
                tau=1e-4,
                lam=1e-6,
                xi=1.0,
                trials=10,
            )
        if experiment == "runtime":
            return cls(experiment=experiment, s=16, lam=1.2e-3, xi=1.0, trials=1, solver="both")
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")

    def xi_values(self):
        lo, hi, step = self.xi_grid
        k = int(round((hi - lo) / step))
        return [float(10.0 ** round(lo + i * step, 10)) for i in range(k + 1)]

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        for name in ("m_values", "sigma_obs2", "levels", "structure_c", "n_values"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must not be empty")
        if self.xi_grid[2] <= 0 or self.xi_grid[1] < self.xi_grid[0]:
            raise ConfigError("xi_grid must be start:stop:step with step > 0")
        if self.sweep not in ("sigma_obs2", "structure_c"):
            raise ConfigError("sweep must be sigma_obs2 or structure_c")
        if any(m > self.n for m in self.m_values) and self.experiment != "runtime":
            raise ConfigError("m values must not exceed n")
        return self


_LIST_KEYS = {"m_values": int, "n_values": int, "sigma_obs2": float}


def _parse_value(key, raw):
    raw = raw.strip()
    if key in _LIST_KEYS:
        return [_LIST_KEYS[key](v) for v in raw.split(",") if v.strip()]
    if key == "structure_c":
        return [None if v.strip().lower() in ("preset", "none") else float(v) for v in raw.split(",") if v.strip()]
    if key == "levels":
        out = []
        for item in raw.split(","):
            sw, sd = item.split(":")
            out.append((int(sw), float(sd)))
        return out
    if key == "xi_grid":
        parts = [float(v) for v in raw.split(":")]
        if len(parts) != 3:
            raise ValueError("expected start:stop:step")
        return tuple(parts)
    kind = {f.name: f.type for f in fields(ExperimentConfig)}[key]
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_assignments(lines) -> dict:
    known = {f.name for f in fields(ExperimentConfig)}
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"line {no}: bad value for {key}: {exc}") from None
    return out


def load_config(experiment: str, path=None, overrides=(), seed=None) -> ExperimentConfig:
    cfg = ExperimentConfig.defaults(experiment)
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_assignments(text.splitlines()))
    values.update(parse_assignments(overrides))
    if seed is not None:
        values["seed"] = int(seed)
    if values.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {values['experiment']!r}, not {experiment!r}")
    return replace(cfg, **values).validate()


# ---------------------------------------------------------------------------
# rows


def make_row(cfg, experiment, trial, seed, **kw):
    row = {k: "" for k in ROW_FIELDS}
    row.update(
        experiment=experiment,
        trial=trial,
        seed=seed,
        n=cfg.n,
        s=cfg.s,
        support_errors=-1,
        sigma_dyn2=-1.0,
        structure_c=-1.0,
        xi=0.0,
        t=-1,
        actions=0,
        converged=1,
    )
    row.update(kw)
    err = row["rmse"]
    row["success"] = int(is_success(err))
    return row


def _est_fields(est, ms):
    return dict(iters=est.iterations, actions=est.actions, wall_ms=ms, converged=int(est.converged))


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, 1e3 * (time.perf_counter() - t0)


def _safe_solve(fn, n, *a, **kw):
    """Run a solver; a numerical failure becomes a zero estimate flagged unconverged."""
    try:
        est, ms = _timed(fn, *a, **kw)
        return est.dense_estimate(), dict(_est_fields(est, ms))
    except NumericalFailure:
        return np.zeros(n), dict(iters=0, actions=0, wall_ms=0.0, converged=0)


def _best_xi(results):
    """Pick xi with the highest success count, then the lowest median rMSE, then the smallest xi."""
    def key(xi):
        errs = results[xi]
        return (-sum(is_success(e) for e in errs), float(np.median(errs)), xi)

    return min(results, key=key)


# ---------------------------------------------------------------------------
# measurement sweep


def _measurement_trial(args):
    cfg, m, trial = args
    seed = trial_seed(cfg.seed, trial)
    n = cfg.n
    D = gen_dictionary(m, n, DictModel(cfg.dict_kind), seed)
    x = gen_sparse_signal(n, SignalModel(cfg.signal_kind, cfg.s), seed)
    sig = cfg.sigma_obs2[0]
    y = measure(D, x, sig, seed)
    opts = FmlOptions(tau=cfg.tau, tol=cfg.tol)
    out = []
    xh, info = _safe_solve(solve_fml, n, D, y, HyperPriors.uninformative(n), cfg.lam, opts)
    out.append(("static", None, 0.0, rmse(xh, x), info))
    for lv, (swaps, sd) in enumerate(cfg.levels):
        xt = corrupt_prediction(x, support_swaps=min(swaps, cfg.s), sigma_dyn2=sd, seed=seed)
        for xi in cfg.xi_values():
            pri = map_prediction_to_hyperpriors(Prediction(xt, xi))
            xh, info = _safe_solve(solve_fml, n, D, y, pri, cfg.lam, opts)
            out.append(("grid", lv, xi, rmse(xh, x), info))
    return m, trial, seed, out


def run_sweep_measurements(cfg: ExperimentConfig, threads=1):
    """Success rate versus M for SBL-DF with a per-point best xi, plus static SBL.

    Emits, per (M, level, trial): one row per xi on the grid
    (``measurements/sbl_df_grid``) and one row at the point's selected xi
    (``measurements/sbl_df``); per (M, trial) one ``measurements/static`` row.
    """
    work = [(cfg, m, trial) for m in cfg.m_values for trial in range(cfg.trials)]
    results = _map(_measurement_trial, work, threads)
    rows = []
    by_point = {}
    sig = cfg.sigma_obs2[0]
    for m, trial, seed, out in results:
        for kind, lv, xi, err, info in out:
            if kind == "static":
                rows.append(make_row(cfg, "measurements/static", trial, seed, m=m, sigma_obs2=sig, solver="fml", rmse=err, **info))
                continue
            swaps, sd = cfg.levels[lv]
            rows.append(
                make_row(cfg, "measurements/sbl_df_grid", trial, seed, m=m, sigma_obs2=sig, sigma_dyn2=sd,
                         support_errors=swaps, xi=xi, solver="fml", rmse=err, **info)
            )
            by_point.setdefault((m, lv), {}).setdefault(xi, []).append((trial, seed, err, info))
    for (m, lv), res in by_point.items():
        xi_star = _best_xi({xi: [e for _, _, e, _ in v] for xi, v in res.items()})
        swaps, sd = cfg.levels[lv]
        for trial, seed, err, info in res[xi_star]:
            rows.append(
                make_row(cfg, "measurements/sbl_df", trial, seed, m=m, sigma_obs2=sig, sigma_dyn2=sd,
                         support_errors=swaps, xi=xi_star, solver="fml", rmse=err, **info)
            )
    return sort_rows(rows)


# ---------------------------------------------------------------------------
# structured dictionary sweep


def _coherence_points(cfg):
    if cfg.sweep == "sigma_obs2":
        return [(sig, cfg.structure_c[0]) for sig in cfg.sigma_obs2]
    return [(cfg.sigma_obs2[0], c) for c in cfg.structure_c]


def _static_solver(cfg, D, y, pri):
    n = D.n
    if cfg.solver == "em":
        opts = EmOptions(tau=cfg.tau, tol=cfg.tol, max_iters=cfg.max_iters, learn_lambda=cfg.learn_lambda,
                         lambda_init=cfg.lam, track_objective=False)
        return _safe_solve(solve_em, n, D, y, pri, opts)
    if cfg.solver == "fml":
        opts = FmlOptions(tau=cfg.tau, tol=cfg.tol, learn_lambda=cfg.learn_lambda)
        return _safe_solve(solve_fml, n, D, y, pri, cfg.lam, opts)
    opts = RwlOptions(tau=cfg.tau, tol=cfg.tol, track_objective=False)
    return _safe_solve(solve_rwl1, n, D, y, pri, cfg.lam, opts)


def _coherence_trial(args):
    cfg, sig, c, trial = args
    seed = trial_seed(cfg.seed, trial)
    n, m = cfg.n, cfg.m_values[0]
    D = gen_dictionary(m, n, DictModel(cfg.dict_kind, c), seed)
    x = gen_sparse_signal(n, SignalModel(cfg.signal_kind, cfg.s), seed)
    y = measure(D, x, sig, seed)
    xt = corrupt_prediction(x, swap_prob=cfg.swap_prob, sigma_dyn2=cfg.sigma_dyn2, seed=seed)
    xh, info = _static_solver(cfg, D, y, HyperPriors.uninformative(n))
    static = (rmse(xh, x), info)
    grid = {}
    for xi in cfg.xi_values():
        xh, info = _static_solver(cfg, D, y, map_prediction_to_hyperpriors(Prediction(xt, xi)))
        grid[xi] = (rmse(xh, x), info)
    return sig, c, trial, seed, static, grid


def run_sweep_coherence(cfg: ExperimentConfig, threads=1):
    """rMSE on structured dictionaries versus noise level or structure parameter.

    Per point and trial: one ``coherence/sbl_df`` row at the point's best xi
    (grid search over all trials of the point) and one ``coherence/static`` row.
    """
    work = [(cfg, sig, c, trial) for sig, c in _coherence_points(cfg) for trial in range(cfg.trials)]
    results = _map(_coherence_trial, work, threads)
    rows = []
    by_point = {}
    for sig, c, trial, seed, static, grid in results:
        sc = -1.0 if c is None else c
        err, info = static
        rows.append(make_row(cfg, "coherence/static", trial, seed, m=cfg.m_values[0], sigma_obs2=sig,
                             sigma_dyn2=cfg.sigma_dyn2, structure_c=sc, solver=cfg.solver, rmse=err, **info))
        by_point.setdefault((sig, sc), []).append((trial, seed, grid))
    for (sig, sc), items in by_point.items():
        xi_star = _best_xi({xi: [g[xi][0] for _, _, g in items] for xi in items[0][2]})
        for trial, seed, grid in items:
            err, info = grid[xi_star]
            rows.append(make_row(cfg, "coherence/sbl_df", trial, seed, m=cfg.m_values[0], sigma_obs2=sig,
                                 sigma_dyn2=cfg.sigma_dyn2, structure_c=sc, xi=xi_star, solver=cfg.solver,
                                 rmse=err, **info))
    return sort_rows(rows)


# ---------------------------------------------------------------------------
# tracking


def _tracking_trial(args):
    cfg, trial = args
    seed = trial_seed(cfg.seed, trial)
    m, sig = cfg.m_values[0], cfg.sigma_obs2[0]
    c = cfg.structure_c[0]
    ds = gen_tracking(cfg.n, cfg.s, cfg.steps, cfg.swap_prob, seed, m=m, dict_model=DictModel(cfg.dict_kind, c),
                      sigma_obs2=sig)
    dyn = DynamicsModel("linear", ds.F) if cfg.steps > 1 else DynamicsModel("identity")
    em = EmOptions(tau=cfg.tau, tol=cfg.tol, max_iters=cfg.max_iters, track_objective=False)
    rw = RwlOptions(tau=cfg.tau, tol=cfg.tol, track_objective=False)
    fm = FmlOptions(tau=cfg.tau, tol=cfg.tol)
    runs = {
        "sbl_df": TrackerConfig(xi=cfg.xi, solver=cfg.solver, lam=cfg.lam, learn_lambda=cfg.learn_lambda, em=em, fml=fm, rwl1=rw),
        "static": TrackerConfig(xi=0.0, solver=cfg.solver, lam=cfg.lam, learn_lambda=cfg.learn_lambda, em=em, fml=fm, rwl1=rw),
        "static_rwl1": TrackerConfig(xi=0.0, solver="rwl1", lam=cfg.lam, rwl1=rw),
    }
    out = {}
    for name, tc in runs.items():
        recs = sbl_df_run(ds.dictionary, ds.y, dyn, tc, ds.x_true)
        out[name] = [(r.rmse, r.iterations, r.actions, r.wall_ms, int(r.converged and not r.failed)) for r in recs]
    return trial, seed, out


def run_tracking(cfg: ExperimentConfig, threads=1):
    """Per-step rMSE of SBL-DF, static SBL and static reweighted-l1 on moving targets."""
    results = _map(_tracking_trial, [(cfg, trial) for trial in range(cfg.trials)], threads)
    rows = []
    solver_of = {"sbl_df": cfg.solver, "static": cfg.solver, "static_rwl1": "rwl1"}
    for trial, seed, out in results:
        for name, recs in out.items():
            for t, (err, it, act, ms, conv) in enumerate(recs, 1):
                rows.append(make_row(cfg, f"tracking/{name}", trial, seed, m=cfg.m_values[0],
                                     sigma_obs2=cfg.sigma_obs2[0], sigma_dyn2=0.0,
                                     structure_c=-1.0 if cfg.structure_c[0] is None else cfg.structure_c[0],
                                     xi=cfg.xi if name == "sbl_df" else 0.0, solver=solver_of[name], t=t,
                                     rmse=err, iters=it, actions=act, wall_ms=ms, converged=conv))
    return sort_rows(rows)


# ---------------------------------------------------------------------------
# runtime


RUNTIME_METHODS = ("sbl_em", "sbl_df_em", "sbl_fml", "sbl_df_fml")


def _runtime_trial(args):
    cfg, n, trial = args
    seed = trial_seed(cfg.seed, trial)
    m = int(round(n * cfg.m_ratio))
    D = gen_dictionary(m, n, DictModel("iid"), seed)
    x = gen_sparse_signal(n, SignalModel(cfg.signal_kind, cfg.s), seed)
    sig = cfg.sigma_obs2[0]
    y = measure(D, x, sig, seed)
    xt = corrupt_prediction(x, swap_prob=cfg.swap_prob, sigma_dyn2=cfg.sigma_dyn2, seed=seed)
    uninf = HyperPriors.uninformative(n)
    inf = map_prediction_to_hyperpriors(Prediction(xt, cfg.xi))
    em = EmOptions(tau=cfg.tau_em, tol=cfg.tol, max_iters=cfg.max_iters, lambda_init=cfg.lam, track_objective=False)
    fm = FmlOptions(tau=cfg.tau_fml, tol=cfg.tol, stop="mu")
    out = {}
    for name in RUNTIME_METHODS:
        pri = inf if "_df_" in name else uninf
        try:
            if name.endswith("em"):
                est, ms = _timed(solve_em, D, y, pri, em)
            else:
                est, ms = _timed(solve_fml, D, y, pri, cfg.lam, fm)
            info = _est_fields(est, ms)
            trace = list(zip(est.active_sizes, [1e3 * t for t in est.iter_times]))
            err = rmse(est.dense_estimate(), x)
        except NumericalFailure:
            info, trace, err = dict(iters=0, actions=0, wall_ms=0.0, converged=0), [], rmse(np.zeros(n), x)
        out[name] = (err, info, trace)
    return n, m, trial, seed, out


def run_runtime(cfg: ExperimentConfig, threads=1):
    """Wall time and iteration counts of EM and FML, with and without dynamics priors.

    Returns (rows, trace_rows); trace rows hold the active-set size and time of
    every iteration (EM) or action (FML).
    """
    work = [(cfg, n, trial) for n in cfg.n_values for trial in range(cfg.trials)]
    results = _map(_runtime_trial, work, threads)
    rows, trace_rows = [], []
    for n, m, trial, seed, out in results:
        for name, (err, info, trace) in out.items():
            solver = "em" if name.endswith("em") else "fml"
            rows.append(make_row(replace(cfg, n=n), f"runtime/{name}", trial, seed, m=m, sigma_obs2=cfg.sigma_obs2[0],
                                 sigma_dyn2=cfg.sigma_dyn2, xi=cfg.xi if "_df_" in name else 0.0,
                                 solver=solver, rmse=err, **info))
            for k, (size, ms) in enumerate(trace):
                trace_rows.append(dict(experiment=f"runtime/{name}", trial=trial, n=n, iteration=k,
                                       active_size=size, iter_ms=ms))
    trace_rows.sort(key=lambda r: (r["experiment"], r["n"], r["trial"], r["iteration"]))
    return sort_rows(rows), trace_rows


# ---------------------------------------------------------------------------
# execution and output


def _call_limited(job):
    fn, args = job
    with threadpool_limits(limits=1):
        return fn(args)


def _map(fn, work, threads):
    """Evaluate independent trials, serially or on a process pool; order is preserved."""
    if threads <= 1 or len(work) <= 1:
        return [_call_limited((fn, w)) for w in work]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(_call_limited, [(fn, w) for w in work], chunksize=max(1, len(work) // (4 * threads))))


def _sort_key(row):
    return tuple((0, v) if isinstance(v, (int, float)) else (1, str(v)) for v in (
        row["experiment"], row["m"], row["n"], row["sigma_obs2"], row["sigma_dyn2"], row["support_errors"],
        row["structure_c"], row["xi"], row["t"], row["trial"]))


def sort_rows(rows):
    return sorted(rows, key=_sort_key)


def format_value(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, rows, columns=ROW_FIELDS):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r[c]) for c in columns])
    Path(path).write_text(buf.getvalue(), newline="")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def success_ci(k, n, z=1.959963984540054):
    """Success rate and normal-approximation 95% interval."""
    p = k / n
    half = z * math.sqrt(p * (1.0 - p) / n)
    return p, max(0.0, p - half), min(1.0, p + half)


def summarize(rows):
    """Aggregate rows by configuration point (all columns except trial/seed/measurements)."""
    keep = ("experiment", "n", "m", "s", "sigma_obs2", "sigma_dyn2", "support_errors", "structure_c", "xi", "solver", "t")
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keep), []).append(r)
    out = []
    for key, grp in groups.items():
        errs = np.array([float(r["rmse"]) for r in grp])
        k = sum(int(r["success"]) for r in grp)
        p, lo, hi = success_ci(k, len(grp))
        q25, med, q75 = np.percentile(errs, [25, 50, 75])
        iters = np.array([float(r["iters"]) for r in grp])
        wall = np.array([float(r["wall_ms"]) for r in grp])
        d = dict(zip(keep, key))
        d.update(trials=len(grp), success_rate=p, ci_low=lo, ci_high=hi, rmse_mean=float(errs.mean()),
                 rmse_median=float(med), rmse_q25=float(q25), rmse_q75=float(q75),
                 iters_median=float(np.median(iters)), wall_ms_median=float(np.median(wall)))
        out.append(d)
    out.sort(key=lambda d: tuple((0, v) if isinstance(v, (int, float)) else (1, str(v)) for v in (d[k] for k in keep)))
    return out


SUMMARY_FIELDS = ("experiment", "n", "m", "s", "sigma_obs2", "sigma_dyn2", "support_errors", "structure_c", "xi",
                  "solver", "t", "trials", "success_rate", "ci_low", "ci_high", "rmse_mean", "rmse_median",
                  "rmse_q25", "rmse_q75", "iters_median", "wall_ms_median")
TRACE_FIELDS = ("experiment", "trial", "n", "iteration", "active_size", "iter_ms")


def run_experiment(cfg: ExperimentConfig, out_dir, threads=1):
    """Run one experiment and write results.csv and summary.csv (plus trace.csv for runtime)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = None
    if cfg.experiment == "measurements":
        rows = run_sweep_measurements(cfg, threads)
    elif cfg.experiment == "coherence":
        rows = run_sweep_coherence(cfg, threads)
    elif cfg.experiment == "tracking":
        rows = run_tracking(cfg, threads)
    else:
        rows, trace = run_runtime(cfg, threads)
    write_csv(out / "results.csv", rows)
    write_csv(out / "summary.csv", summarize(rows), SUMMARY_FIELDS)
    if trace is not None:
        write_csv(out / "trace.csv", trace, TRACE_FIELDS)
    return rows
