"""Expectation-maximization SBL with inverse-gamma hyperpriors and pruning."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    GAMMA_FLOOR,
    Dictionary,
    DomainError,
    HyperPriors,
    SblEstimate,
    dyn_objective,
    empty_estimate,
    posterior_moments,
    posterior_summary,
)


@dataclass(frozen=True)
class EmOptions:
    tau: float = 1e-4
    tol: float = 1e-4
    max_iters: int = 2000
    learn_lambda: bool = False
    lambda_init: float = 1e-3
    gamma_init: float = 1.0
    lambda_floor: float = 1e-12
    track_objective: bool = True

    def __post_init__(self):
        for name in ("tau", "tol", "lambda_init", "gamma_init"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")


def update_gamma(sigma_diag, mu, a, b):
    """M-step for the active variances: (Sigma_ii + mu_i^2 + 2 b_i) / (1 + 2 a_i)."""
    g = (sigma_diag + mu**2 + 2.0 * b) / (1.0 + 2.0 * a)
    g[g < GAMMA_FLOOR] = 0.0
    return g


def update_lambda(resid_sq, trace_term, m, floor=1e-12):
    """Noise update (||y - Phi mu||^2 + Tr[Phi^T Phi Sigma]) / M."""
    return max((resid_sq + trace_term) / m, floor)


def prune(state: SblEstimate) -> SblEstimate:
    """Drop active coordinates whose variance fell below ``state.tau``."""
    keep = state.gamma[state.active] >= state.tau
    if np.all(keep):
        return state
    gamma = state.gamma.copy()
    gamma[state.active[~keep]] = 0.0
    return replace(
        state,
        gamma=gamma,
        active=state.active[keep],
        sigma=state.sigma[np.ix_(keep, keep)],
        mu=state.mu[keep],
    )


def em_step(state: SblEstimate, dictionary: Dictionary, y, priors: HyperPriors, learn_lambda=False) -> SblEstimate:
    """One EM iteration on a state whose posterior moments are current."""
    y = np.asarray(y, dtype=float)
    T = state.active
    gamma = state.gamma.copy()
    gamma[T] = update_gamma(np.diag(state.sigma).copy(), state.mu, priors.a[T], priors.b[T])
    lam = state.lam
    if learn_lambda:
        phi_t = dictionary.phi[:, T]
        r = y - phi_t @ state.mu
        tr = float(np.sum((phi_t.T @ phi_t) * state.sigma))
        lam = update_lambda(float(r @ r), tr, dictionary.m)
    nxt = prune(replace(state, gamma=gamma, lam=lam))
    T = nxt.active
    sigma, mu = posterior_moments(dictionary.phi[:, T], y, gamma[T], lam)
    return replace(nxt, sigma=sigma, mu=mu, iterations=state.iterations + 1)


def initial_state(dictionary: Dictionary, y, opts: EmOptions) -> SblEstimate:
    n = dictionary.n
    gamma = np.full(n, float(opts.gamma_init))
    active = np.arange(n)
    sigma, mu = posterior_moments(dictionary.phi, y, gamma, opts.lambda_init)
    return SblEstimate(gamma=gamma, lam=float(opts.lambda_init), active=active, sigma=sigma, mu=mu, tau=opts.tau)


def solve_em(dictionary: Dictionary, y, priors: HyperPriors, opts: EmOptions = EmOptions(), gamma0=None) -> SblEstimate:
    """Iterate EM updates until the dense posterior mean stops moving.

    The loop only keeps the diagonal of the posterior covariance; the full
    active-set covariance is formed once at the end.

    ``objective_trace[k]`` is the objective at the k-th variance iterate, with
    the hyperprior terms summed over the coordinates still in the model.
    ``pruned_at`` lists the iterations k whose update removed coordinates, so
    ``objective_trace[k] -> objective_trace[k+1]`` crossed a pruning event.

    ``gamma0`` optionally replaces the constant ``opts.gamma_init`` start with
    a positive per-coordinate vector (used for warm starts).
    """
    y = np.asarray(y, dtype=float)
    phi = dictionary.phi
    m, n = phi.shape
    if y.shape != (m,):
        raise DomainError(f"y has shape {y.shape}, expected ({m},)")
    if priors.n != n:
        raise DomainError(f"priors cover {priors.n} coordinates, dictionary has {n}")
    a, b = priors.a, priors.b
    lam = float(opts.lambda_init)
    if not np.any(y) and not np.any(b):
        # log|C| alone is minimized by the empty model
        return empty_estimate(n, lam, opts.tau, iterations=0, converged=True)
    if gamma0 is None:
        gamma = np.full(n, float(opts.gamma_init))
    else:
        gamma = np.array(gamma0, dtype=float)
        if gamma.shape != (n,) or not np.all(np.isfinite(gamma) & (gamma > 0)):
            raise DomainError("gamma0 must hold n positive finite values")
    active = np.arange(n)

    trace, sizes, times, pruned_at = [], [], [], []
    post = posterior_summary(phi, y, gamma, lam)
    x_prev = np.zeros(n)
    x_prev[active] = post.mu
    converged = False
    it = 0
    while it < opts.max_iters:
        t0 = time.perf_counter()
        if opts.track_objective:
            trace.append(post.logdet_c + post.quad + dyn_objective(gamma, priors, active_only=True))
        sizes.append(active.size)
        if active.size == 0:
            converged = True
            times.append(time.perf_counter() - t0)
            break
        g_new = update_gamma(post.sigma_diag, post.mu, a[active], b[active])
        if opts.learn_lambda:
            phi_t = phi[:, active]
            r = y - phi_t @ post.mu
            # Tr[Phi^T Phi Sigma] = lam * sum(1 - Sigma_ii / gamma_i) at a consistent posterior
            tr = lam * float(np.sum(1.0 - post.sigma_diag / gamma[active]))
            lam = update_lambda(float(r @ r), tr, m, opts.lambda_floor)
        gamma[active] = g_new
        keep = g_new >= opts.tau
        pruned = not np.all(keep)
        if pruned:
            gamma[active[~keep]] = 0.0
            active = active[keep]
            pruned_at.append(it)
        post = posterior_summary(phi[:, active], y, gamma[active], lam)
        it += 1
        x = np.zeros(n)
        x[active] = post.mu
        step = float(np.linalg.norm(x - x_prev))
        x_prev = x
        times.append(time.perf_counter() - t0)
        if not pruned and step < opts.tol:
            converged = True
            break

    if opts.track_objective and len(trace) == it:
        trace.append(post.logdet_c + post.quad + dyn_objective(gamma, priors, active_only=True))
    sigma, mu = posterior_moments(phi[:, active], y, gamma[active], lam)
    return SblEstimate(
        gamma=gamma,
        lam=lam,
        active=active,
        sigma=sigma,
        mu=mu,
        tau=opts.tau,
        iterations=it,
        objective_trace=trace,
        converged=converged,
        active_sizes=sizes,
        iter_times=times,
        pruned_at=pruned_at,
    )
