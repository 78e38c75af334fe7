"""SBL probability model: shared types, posterior moments, evidence and objective.

Notation follows the usual SBL conventions: ``phi`` is the M x N dictionary,
``gamma`` the prior variances, ``lam`` the noise variance and ``(a, b)`` the
inverse-gamma hyperprior parameters on each ``gamma_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaln

GAMMA_FLOOR = 1e-300
COND_LIMIT = 1e14


class NumericalFailure(RuntimeError):
    """A factorization or solve could not be carried out reliably."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


class Dictionary:
    """Sensing matrix with cached squared column norms.

    Parameters
    ----------
    phi : array_like, shape (M, N)
    """

    def __init__(self, phi):
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if phi.ndim != 2 or phi.shape[0] < 1 or phi.shape[1] < 1:
            raise DomainError(f"dictionary must be a non-empty matrix, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise DomainError("dictionary entries must be finite")
        self.phi = _frozen(phi)
        self.column_sq_norms = _frozen(np.einsum("ij,ij->j", phi, phi))

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    def columns(self, idx) -> np.ndarray:
        return self.phi[:, np.asarray(idx, dtype=int)]

    def __repr__(self):
        return f"Dictionary(m={self.m}, n={self.n})"


@dataclass(frozen=True)
class HyperPriors:
    """Inverse-gamma hyperprior parameters.

    ``a``/``b`` are per-coefficient shape/scale; ``c``/``d`` belong to the noise
    variance and are kept at zero by every solver in this package.
    """

    a: np.ndarray
    b: np.ndarray
    c: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        a = _frozen(np.atleast_1d(self.a))
        b = _frozen(np.atleast_1d(self.b))
        if a.shape != b.shape or a.ndim != 1:
            raise DomainError(f"a and b must be vectors of equal length, got {a.shape} and {b.shape}")
        for name, v in (("a", a), ("b", b), ("c", np.array(self.c)), ("d", np.array(self.d))):
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise DomainError(f"hyperprior parameter {name} must be finite and nonnegative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def uninformative(cls, n: int) -> "HyperPriors":
        return cls(np.zeros(n), np.zeros(n))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def is_uninformative(self) -> bool:
        return not (np.any(self.a) or np.any(self.b))


@dataclass(frozen=True)
class Prediction:
    """Dynamics-based signal prediction and its trade-off weight."""

    x_tilde: np.ndarray
    xi: float

    def __post_init__(self):
        x = _frozen(np.atleast_1d(self.x_tilde))
        if not np.all(np.isfinite(x)):
            raise DomainError("prediction must be finite")
        if not np.isfinite(self.xi) or self.xi < 0:
            raise DomainError(f"xi must be finite and >= 0, got {self.xi}")
        object.__setattr__(self, "x_tilde", x)


@dataclass
class SblEstimate:
    """Result of an SBL solve.

    ``sigma`` and ``mu`` live on the active set ``active``; use
    :meth:`dense_estimate` for the length-N coefficient vector.
    """

    gamma: np.ndarray
    lam: float
    active: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    tau: float
    iterations: int = 0
    objective_trace: list = field(default_factory=list)
    converged: bool = True
    actions: int = 0
    active_sizes: list = field(default_factory=list)
    iter_times: list = field(default_factory=list)
    pruned_at: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.gamma.shape[0]

    def dense_estimate(self) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.active] = self.mu
        return x


def empty_estimate(n: int, lam: float, tau: float, **kw) -> SblEstimate:
    return SblEstimate(
        gamma=np.zeros(n),
        lam=lam,
        active=np.zeros(0, dtype=int),
        sigma=np.zeros((0, 0)),
        mu=np.zeros(0),
        tau=tau,
        **kw,
    )


def _cholesky(A, what):
    try:
        c, lower = sla.cho_factor(A, lower=True, check_finite=False)
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"{what}: Cholesky factorization failed ({exc})") from None
    d = np.diag(c)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise NumericalFailure(f"{what}: factor has non-positive pivots")
    return c, lower, d


def _gamma_range(gamma):
    if gamma.size == 0:
        return "empty"
    return f"[{gamma.min():.3g}, {gamma.max():.3g}]"


def _scaled_precision(phi_active, gamma_active, lam):
    """Cholesky of I + G^{1/2} Phi^T Phi G^{1/2} / lam with G = diag(gamma).

    Equivalent to the posterior precision Gamma^{-1} + Phi^T Phi / lam up to a
    diagonal congruence, but with eigenvalues bounded below by one, so it
    stays well conditioned as entries of gamma approach the pruning level.
    """
    r = np.sqrt(gamma_active)
    B = phi_active * r
    A = B.T @ B / lam
    A[np.diag_indices_from(A)] += 1.0
    what = f"posterior precision (gamma range {_gamma_range(gamma_active)})"
    c, _, d = _cholesky(A, what)
    if (d.max() / d.min()) ** 2 > COND_LIMIT:
        raise NumericalFailure(f"{what} is ill-conditioned")
    return c, d, r


def _evidence_factor(phi_active, gamma_active, lam):
    m = phi_active.shape[0]
    G = phi_active * gamma_active
    C = G @ phi_active.T
    C[np.diag_indices(m)] += lam
    what = f"evidence covariance (gamma range {_gamma_range(gamma_active)})"
    c, _, d = _cholesky(C, what)
    if (d.max() / d.min()) ** 2 > COND_LIMIT:
        raise NumericalFailure(f"{what} is ill-conditioned")
    return c, d, G


def _check_args(gamma_active, lam):
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if np.any(gamma_active <= 0):
        raise DomainError("gamma_active must be strictly positive")


def posterior_moments(phi_active, y, gamma_active, lam, method="auto"):
    """Posterior covariance and mean on the active set.

    Parameters
    ----------
    phi_active : ndarray, shape (M, T)
    y : ndarray, shape (M,)
    gamma_active : ndarray, shape (T,), strictly positive
    lam : float
    method : {"auto", "direct", "woodbury"}
        ``direct`` factors the T x T precision; ``woodbury`` works through the
        M x M evidence covariance. ``auto`` picks the smaller system.

    Returns
    -------
    sigma : ndarray, shape (T, T)
    mu : ndarray, shape (T,)
    """
    phi_active = np.asarray(phi_active, dtype=float)
    y = np.asarray(y, dtype=float)
    gamma_active = np.asarray(gamma_active, dtype=float)
    _check_args(gamma_active, lam)
    m, t = phi_active.shape
    if t == 0:
        return np.zeros((0, 0)), np.zeros(0)
    if method == "auto":
        method = "woodbury" if t > m else "direct"
    if method == "direct":
        c, _, r = _scaled_precision(phi_active, gamma_active, lam)
        Linv = sla.solve_triangular(c, np.diag(r), lower=True, check_finite=False)
        sigma = Linv.T @ Linv
    elif method == "woodbury":
        c, _, G = _evidence_factor(phi_active, gamma_active, lam)
        W = sla.cho_solve((c, True), G, check_finite=False)
        sigma = np.diag(gamma_active) - G.T @ W
    else:
        raise ValueError(f"unknown method {method!r}")
    sigma = 0.5 * (sigma + sigma.T)
    mu = sigma @ (phi_active.T @ y) / lam
    return sigma, mu


@dataclass
class PosteriorSummary:
    """Diagonal posterior quantities plus the evidence terms, without full Sigma."""

    sigma_diag: np.ndarray
    mu: np.ndarray
    logdet_c: float
    quad: float  # y^T C^{-1} y


def posterior_summary(phi_active, y, gamma_active, lam) -> PosteriorSummary:
    """Diagonal of Sigma, mu, log|C| and y^T C^{-1} y from one factorization.

    Used by the iterative solvers; picks the T x T or M x M route by size.
    """
    _check_args(gamma_active, lam)
    m, t = phi_active.shape
    if t == 0:
        return PosteriorSummary(np.zeros(0), np.zeros(0), m * np.log(lam), float(y @ y) / lam)
    if t <= m:
        c, d, r = _scaled_precision(phi_active, gamma_active, lam)
        Linv = sla.solve_triangular(c, np.eye(t), lower=True, check_finite=False)
        sigma_diag = r**2 * np.einsum("ij,ij->j", Linv, Linv)
        h = sla.cho_solve((c, True), r * (phi_active.T @ y), check_finite=False)
        mu = r * h / lam
        logdet_c = m * np.log(lam) + 2.0 * np.sum(np.log(d))
        res = y - phi_active @ mu
        quad = float(res @ res) / lam + float(h @ h) / lam**2
    else:
        c, d, G = _evidence_factor(phi_active, gamma_active, lam)
        W = sla.cho_solve((c, True), phi_active, check_finite=False)
        sigma_diag = gamma_active - gamma_active**2 * np.einsum("ij,ij->j", phi_active, W)
        u = sla.cho_solve((c, True), y, check_finite=False)
        mu = gamma_active * (phi_active.T @ u)
        logdet_c = 2.0 * np.sum(np.log(d))
        quad = float(y @ u)
    return PosteriorSummary(sigma_diag, mu, float(logdet_c), quad)


def marginal_covariance(dictionary: Dictionary, gamma, lam) -> np.ndarray:
    """Evidence covariance C = lam*I + Phi Gamma Phi^T."""
    gamma = np.asarray(gamma, dtype=float)
    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if not np.all(np.isfinite(gamma)) or not np.isfinite(lam):
        raise DomainError("gamma and lambda must be finite")
    nz = np.flatnonzero(gamma)
    phi = dictionary.phi[:, nz]
    C = (phi * gamma[nz]) @ phi.T
    C[np.diag_indices_from(C)] += lam
    return 0.5 * (C + C.T)


def prior_terms(gamma, priors: HyperPriors, active_only=False) -> np.ndarray:
    """Per-coordinate hyperprior contribution 2*(a*log(gamma) + b/gamma).

    Pruned coordinates (gamma == 0) contribute 0 when b == 0 and +inf when
    b > 0. With ``active_only`` they always contribute 0, i.e. their
    hyperprior leaves the model together with the coordinate.
    """
    gamma = np.asarray(gamma, dtype=float)
    a, b = priors.a, priors.b
    out = np.zeros_like(gamma)
    on = gamma > 0
    out[on] = 2.0 * (a[on] * np.log(gamma[on]) + b[on] / gamma[on])
    if not active_only:
        out[~on & (b > 0)] = np.inf
    return out


def dyn_objective(gamma, priors: HyperPriors, active_only=False) -> float:
    """Hyperprior part of the objective, 2*sum(-a*log(1/gamma) + b/gamma)."""
    return float(np.sum(prior_terms(gamma, priors, active_only)))


def neg_log_likelihood(dictionary: Dictionary, y, gamma, lam, priors: HyperPriors, active_only=False) -> float:
    """Negative log marginal likelihood with inverse-gamma hyperpriors.

    log|C| + y^T C^{-1} y - 2*sum(a_i log(1/gamma_i) - b_i/gamma_i)

    Returns ``inf`` when some pruned coordinate carries b_i > 0 (unless
    ``active_only``).
    """
    gamma = np.asarray(gamma, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if np.any(gamma < 0):
        raise DomainError("gamma must be nonnegative")
    dyn = dyn_objective(gamma, priors, active_only)
    if np.isinf(dyn):
        return np.inf
    C = marginal_covariance(dictionary, gamma, lam)
    c, lower, d = _cholesky(C, "evidence covariance")
    logdet = 2.0 * np.sum(np.log(d))
    quad = float(y @ sla.cho_solve((c, lower), y, check_finite=False))
    return float(logdet + quad + dyn)


def map_prediction_to_hyperpriors(pred: Prediction) -> HyperPriors:
    """a_i = xi, b_i = xi * x_tilde_i**2."""
    x = pred.x_tilde
    return HyperPriors(np.full(x.shape, float(pred.xi)), pred.xi * x**2)


def gamma_dyn_optimum(priors: HyperPriors) -> np.ndarray:
    """Minimizer b_i / a_i of each hyperprior term."""
    if np.any(priors.a <= 0):
        raise DomainError("gamma_dyn_optimum needs a_i > 0 for every coordinate")
    return priors.b / priors.a


def effective_prior_density(x, a, b):
    """Marginal of N(x; 0, gamma) under gamma ~ IG(a, b): a Student's-t density.

    Degrees of freedom 2a, scale sqrt(b/a). Evaluated in log space.
    """
    x = np.asarray(x, dtype=float)
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise DomainError("effective prior needs a > 0 and b > 0")
    logp = (
        a * np.log(b)
        + gammaln(a + 0.5)
        - 0.5 * np.log(2.0 * np.pi)
        - gammaln(a)
        - (a + 0.5) * np.log(b + 0.5 * x**2)
    )
    out = np.exp(logp)
    return float(out) if out.ndim == 0 else out


def rmse(x_hat, x) -> float:
    """Relative squared error ||x - x_hat||^2 / ||x||^2."""
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    den = float(x @ x)
    if den == 0:
        raise DomainError("relative error undefined for an all-zero ground truth")
    r = x - x_hat
    return float(r @ r) / den


SUCCESS_RMSE = 1e-2


def is_success(err: float) -> bool:
    return err < SUCCESS_RMSE
