"""Causal SBL-DF loop: predict from the previous estimate, inject into hyperpriors, solve."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import convolve1d

from .em import EmOptions, solve_em
from .fml import FmlOptions, solve_fml
from .model import (
    Dictionary,
    DomainError,
    HyperPriors,
    NumericalFailure,
    Prediction,
    SblEstimate,
    map_prediction_to_hyperpriors,
    rmse,
)
from .rwl1 import RwlOptions, solve_rwl1


@dataclass(frozen=True)
class DynamicsModel:
    """x_tilde = f_t(x_prev).

    kind is ``identity``, ``linear`` (``F`` an N x N matrix, or a stack of
    per-step matrices with ``F[t-1]`` used when predicting step t from t-1),
    or ``kernel`` (circular convolution with a normalized Gaussian of standard
    deviation ``width`` indices).
    """

    kind: str = "identity"
    F: np.ndarray | None = None
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "linear", "kernel"):
            raise DomainError(f"unknown dynamics kind {self.kind!r}")
        if self.kind == "linear":
            if self.F is None or np.asarray(self.F).ndim not in (2, 3):
                raise DomainError("linear dynamics need a matrix or a stack of matrices")
            if not np.all(np.isfinite(self.F)):
                raise DomainError("dynamics matrix must be finite")
        if self.kind == "kernel" and not self.width > 0:
            raise DomainError("kernel width must be positive")

    @classmethod
    def shift(cls, n, directions_by_index):
        """Linear model moving the entry at index i by directions_by_index[i] (0 = stay)."""
        F = np.zeros((n, n))
        for i, d in enumerate(directions_by_index):
            F[(i + int(d)) % n, i] = 1.0
        return cls("linear", F)


def _kernel(width):
    half = int(np.ceil(6.0 * width))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    return k / k.sum()


def predict(model: DynamicsModel, x_prev, step: int = 1) -> np.ndarray:
    """Apply the dynamics; ``step`` is the index t of the step being predicted."""
    x_prev = np.asarray(x_prev, dtype=float)
    if model.kind == "identity":
        return x_prev.copy()
    if model.kind == "linear":
        F = np.asarray(model.F)
        if F.ndim == 3:
            F = F[min(max(step - 1, 0), F.shape[0] - 1)]
        return F @ x_prev
    k = _kernel(model.width)
    return convolve1d(x_prev, k, mode="wrap")


@dataclass(frozen=True)
class TrackerConfig:
    xi: float = 1.0
    solver: str = "em"
    lam: float = 1e-3
    learn_lambda: bool = False
    em: EmOptions = EmOptions()
    fml: FmlOptions = FmlOptions()
    rwl1: RwlOptions = RwlOptions()
    # start each EM solve from the previous step's variances (floored at the
    # pruning threshold) instead of gamma_init; off by default
    warm_start: bool = False

    def __post_init__(self):
        if self.solver not in ("em", "fml", "rwl1"):
            raise DomainError(f"unknown solver {self.solver!r}")
        if self.warm_start and self.solver != "em":
            raise DomainError("warm_start is only available for the em solver")
        if not (np.isfinite(self.xi) and self.xi >= 0):
            raise DomainError("xi must be finite and >= 0")


def solve(dictionary: Dictionary, y, priors: HyperPriors, cfg: TrackerConfig, gamma0=None) -> SblEstimate:
    """Dispatch one static solve to the configured engine."""
    if cfg.solver == "em":
        opts = replace(cfg.em, lambda_init=cfg.lam, learn_lambda=cfg.learn_lambda)
        return solve_em(dictionary, y, priors, opts, gamma0=gamma0)
    if cfg.solver == "fml":
        return solve_fml(dictionary, y, priors, cfg.lam, replace(cfg.fml, learn_lambda=cfg.learn_lambda))
    return solve_rwl1(dictionary, y, priors, cfg.lam, cfg.rwl1)


@dataclass
class StepRecord:
    estimate: SblEstimate | None
    x_hat: np.ndarray
    rmse: float
    iterations: int
    actions: int
    wall_ms: float
    converged: bool
    failed: bool = False
    info: dict = field(default_factory=dict)


def sbl_df_run(dictionary: Dictionary, measurements, model: DynamicsModel, cfg: TrackerConfig, x_true=None):
    """Run SBL-DF over a sequence of measurement vectors.

    Step 1 uses uninformative hyperpriors; later steps map the prediction of
    the previous dense estimate through a_i = xi, b_i = xi * x_tilde_i^2.
    A step whose solver fails is recorded as failed with a zero estimate and
    the following step falls back to uninformative hyperpriors.
    """
    Y = np.atleast_2d(np.asarray(measurements, dtype=float))
    L = Y.shape[0]
    if L < 1:
        raise DomainError("need at least one time step")
    n = dictionary.n
    records = []
    prev = None
    prev_gamma = None
    for t in range(L):
        if prev is None:
            priors = HyperPriors.uninformative(n)
        else:
            priors = map_prediction_to_hyperpriors(Prediction(predict(model, prev, t), cfg.xi))
        t0 = time.perf_counter()
        try:
            if cfg.warm_start and prev_gamma is not None:
                est = solve(dictionary, Y[t], priors, cfg, gamma0=np.maximum(prev_gamma, cfg.em.tau))
            else:
                est = solve(dictionary, Y[t], priors, cfg)
        except NumericalFailure as exc:
            ms = 1e3 * (time.perf_counter() - t0)
            x_hat = np.zeros(n)
            err = rmse(x_hat, x_true[t]) if x_true is not None else float("nan")
            records.append(StepRecord(None, x_hat, err, 0, 0, ms, False, True, {"error": str(exc)}))
            prev = None
            prev_gamma = None
            continue
        ms = 1e3 * (time.perf_counter() - t0)
        x_hat = est.dense_estimate()
        err = rmse(x_hat, x_true[t]) if x_true is not None else float("nan")
        records.append(StepRecord(est, x_hat, err, est.iterations, est.actions, ms, est.converged))
        prev = x_hat
        prev_gamma = est.gamma
    return records
