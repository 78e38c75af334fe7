"""Fast marginal likelihood (sequential add/delete/re-estimate) with informative hyperpriors.

The state keeps the active-set posterior together with, for every column k,
``S_k = phi_k^T C^{-1} phi_k`` and ``Q_k = phi_k^T C^{-1} y``. Each accepted
action changes one variance and is applied with an O(MN) rank-one update.

Objective values here sum the hyperprior terms over active coordinates only
(a coordinate's hyperprior leaves the model along with it), which is the
convention under which the per-coordinate decomposition is exact.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (
    Dictionary,
    DomainError,
    HyperPriors,
    NumericalFailure,
    SblEstimate,
    dyn_objective,
    posterior_moments,
    posterior_summary,
)

REESTIMATE, ADD, DELETE, NOOP = "reestimate", "add", "delete", "noop"
_IMAG_TOL = 1e-9


# ---------------------------------------------------------------------------
# per-coordinate objective


def ell_gamma_j(gamma, s, q, a=0.0, b=0.0):
    """Part of the objective that depends on one variance gamma_j.

    log(1/gamma + s) - q^2/(1/gamma + s) - (2a+1) log(1/gamma) + 2b/gamma,
    evaluated as log(1 + gamma s) - q^2 gamma/(1 + gamma s) + 2a log gamma + 2b/gamma.
    At gamma = 0 the limit is 0 for b = 0 and +inf for b > 0.
    Works elementwise on arrays.
    """
    gamma, s, q, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (gamma, s, q, a, b)))
    out = np.zeros(gamma.shape)
    on = gamma > 0
    g = gamma[on]
    gs = g * s[on]
    out[on] = np.log1p(gs) - q[on] ** 2 * g / (1.0 + gs) + 2.0 * a[on] * np.log(g) + 2.0 * b[on] / g
    out[~on & (b > 0)] = np.inf
    return float(out) if out.ndim == 0 else out


def ell_gamma_j_derivative(gamma, s, q, a=0.0, b=0.0):
    """d ell / d gamma = s/(1+gamma s) - q^2/(1+gamma s)^2 + 2a/gamma - 2b/gamma^2."""
    gamma = np.asarray(gamma, dtype=float)
    d = 1.0 + gamma * s
    return s / d - q**2 / d**2 + 2.0 * a / gamma - 2.0 * b / gamma**2


def ell_gamma_j_second_derivative(gamma, s, q, a=0.0, b=0.0):
    """-2a/gamma^2 + 4b/gamma^3 - (s^3 gamma + s^2 - 2 q^2 s)/(gamma s + 1)^3."""
    gamma = np.asarray(gamma, dtype=float)
    d = gamma * s + 1.0
    return -2.0 * a / gamma**2 + 4.0 * b / gamma**3 - (s**3 * gamma + s**2 - 2.0 * q**2 * s) / d**3


def cubic_coefficients(s, q, a, b):
    """Coefficients (c3, c2, c1, c0) of the numerator of the derivative, times 1/2."""
    s, q, a, b = (np.asarray(v, dtype=float) for v in (s, q, a, b))
    c3 = (0.5 + a) * s**2
    c2 = (0.5 + 2.0 * a) * s - 0.5 * q**2 - b * s**2
    c1 = a - 2.0 * b * s
    c0 = -b
    return c3, c2, c1, c0


def _cubic_roots(c3, c2, c1, c0):
    """Positive real roots of batched cubics via companion-matrix eigenvalues.

    Returns an (n, 3) array with NaN where a root is complex or nonpositive.
    """
    c3, c2, c1, c0 = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (c3, c2, c1, c0)))
    n = c3.shape[0]
    comp = np.zeros((n, 3, 3))
    comp[:, 1, 0] = 1.0
    comp[:, 2, 1] = 1.0
    comp[:, 0, 2] = -c0 / c3
    comp[:, 1, 2] = -c1 / c3
    comp[:, 2, 2] = -c2 / c3
    ev = np.linalg.eigvals(comp)
    re = ev.real.copy()
    ok = (np.abs(ev.imag) <= _IMAG_TOL * (1.0 + np.abs(re))) & (re > 0)
    re[~ok] = np.nan
    # a couple of Newton steps on the polynomial tighten the eigenvalue estimates
    C3, C2, C1, C0 = (v[:, None] for v in (c3, c2, c1, c0))
    for _ in range(2):
        p = ((C3 * re + C2) * re + C1) * re + C0
        dp = (3.0 * C3 * re + 2.0 * C2) * re + C1
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = re - p / dp
        p_new = ((C3 * cand + C2) * cand + C1) * cand + C0
        better = np.isfinite(cand) & (cand > 0) & (np.abs(p_new) < np.abs(p))
        re = np.where(better, cand, re)
    return re


def stationary_points_from_coefficients(c3, c2, c1, c0):
    r = _cubic_roots(c3, c2, c1, c0)[0]
    return sorted(float(v) for v in r[np.isfinite(r)])


def stationary_points(s, q, a=0.0, b=0.0):
    """Positive real stationary points of ell_gamma_j, ascending."""
    if not s > 0:
        raise DomainError(f"s must be positive, got {s}")
    return stationary_points_from_coefficients(*cubic_coefficients(s, q, a, b))


def _fallback_minimum(s, q, a, b):
    # only reached when b > 0 and the root screen kept nothing
    f = lambda t: ell_gamma_j(np.exp(t), s, q, a, b)
    scale = max(b / max(a, 1e-300), q**2 / s**2, 1.0 / s, b) if a > 0 else max(q**2 / s**2, 1.0 / s, b)
    lo, hi = np.log(b) - 40.0, np.log(scale) + 40.0
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return float(np.exp(res.x))


def select_gamma(candidates, s, q, a=0.0, b=0.0):
    """Pick the candidate with the smallest ell_gamma_j among local minima.

    The boundary gamma = 0 (value 0) competes when b = 0; an interior root wins
    only if it is strictly lower.
    """
    best, best_val = 0.0, (0.0 if b == 0 else np.inf)
    for g in candidates:
        if g > 0 and ell_gamma_j_second_derivative(g, s, q, a, b) > 0:
            v = ell_gamma_j(g, s, q, a, b)
            if v < best_val:
                best, best_val = float(g), v
    if not np.isfinite(best_val):
        best = _fallback_minimum(s, q, a, b)
    return best


def select_gamma_batch(s, q, a, b):
    """Vectorized stationary-point analysis and selection for all coordinates."""
    roots = _cubic_roots(*cubic_coefficients(s, q, a, b))
    S, Qv, A, B = (np.asarray(v, dtype=float)[:, None] for v in (s, q, a, b))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        curv = ell_gamma_j_second_derivative(roots, S, Qv, A, B)
        gs = roots * S
        vals = np.log1p(gs) - Qv**2 * roots / (1.0 + gs) + 2.0 * A * np.log(roots) + 2.0 * B / roots
    vals = np.where(np.isfinite(roots) & (curv > 0), vals, np.inf)
    k = np.argmin(vals, axis=1)
    idx = np.arange(roots.shape[0])
    best_val = vals[idx, k]
    boundary = np.where(np.asarray(b) == 0, 0.0, np.inf)
    take = best_val < boundary
    g = np.where(take, roots[idx, k], 0.0)
    missing = np.flatnonzero(~take & ~np.isfinite(boundary))
    for i in missing:
        g[i] = _fallback_minimum(float(s[i]), float(q[i]), float(a[i]), float(b[i]))
    return g


# ---------------------------------------------------------------------------
# state


@dataclass
class FmlState:
    """Active-set posterior plus per-column S/Q statistics.

    ``active`` is ordered; row/column p of ``sigma`` and entry p of ``mu``
    belong to coordinate ``active[p]``.
    """

    dictionary: Dictionary
    y: np.ndarray
    priors: HyperPriors
    lam: float
    active: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    S: np.ndarray
    Q: np.ndarray
    tau: float = 0.1
    tol: float = 1e-4
    objective: float = 0.0

    @property
    def n(self) -> int:
        return self.gamma.shape[0]

    def position(self, j) -> int:
        hits = np.flatnonzero(self.active == j)
        return int(hits[0]) if hits.size else -1

    def sq(self):
        """Leave-one-out statistics s, q for every coordinate.

        For active k, s_k = S_k/(1 - gamma_k S_k) and q_k = Q_k/(1 - gamma_k S_k);
        these are evaluated through the equivalent forms 1/Sigma_pp - 1/gamma_k
        and mu_p/Sigma_pp, which avoid the cancellation in 1 - gamma_k S_k.
        """
        s = self.S.copy()
        q = self.Q.copy()
        if self.active.size:
            T = self.active
            dg = np.diag(self.sigma)
            if np.any(dg <= 0):
                raise NumericalFailure("posterior covariance has a nonpositive diagonal entry")
            s[T] = 1.0 / dg - 1.0 / self.gamma[T]
            q[T] = self.mu / dg
            if np.any(s[T] <= 0):
                raise NumericalFailure("active coordinate with 1 - gamma*S <= 0")
        return s, q

    def to_estimate(self, **kw) -> SblEstimate:
        return SblEstimate(
            gamma=self.gamma.copy(),
            lam=self.lam,
            active=self.active.copy(),
            sigma=self.sigma.copy(),
            mu=self.mu.copy(),
            tau=self.tau,
            **kw,
        )


@dataclass(frozen=True)
class CandidateAction:
    index: int
    kind: str
    gamma_new: float
    delta: float


def objective(state: FmlState) -> float:
    """Objective of the state recomputed from scratch (active-only hyperprior terms)."""
    T = state.active
    post = posterior_summary(state.dictionary.phi[:, T], state.y, state.gamma[T], state.lam)
    return post.logdet_c + post.quad + dyn_objective(state.gamma, state.priors, active_only=True)


def dense_statistics(dictionary: Dictionary, y, active, gamma_active, lam):
    """Sigma, mu, S, Q from a full recomputation on the given active set."""
    phi = dictionary.phi
    phi_t = phi[:, active]
    sigma, mu = posterior_moments(phi_t, y, gamma_active, lam)
    P = phi_t.T @ phi
    S = dictionary.column_sq_norms / lam - np.einsum("ij,ij->j", P, sigma @ P) / lam**2
    Q = phi.T @ y / lam - P.T @ mu / lam
    return sigma, mu, S, Q


def rebuild(state: FmlState) -> FmlState:
    T = state.active
    sigma, mu, S, Q = dense_statistics(state.dictionary, state.y, T, state.gamma[T], state.lam)
    st = replace(state, sigma=sigma, mu=mu, S=S, Q=Q)
    st.objective = objective(st)
    return st


def empty_state(dictionary: Dictionary, y, lam, priors: HyperPriors, tau=0.1, tol=1e-4) -> FmlState:
    y = np.asarray(y, dtype=float)
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    phi = dictionary.phi
    return FmlState(
        dictionary=dictionary,
        y=y,
        priors=priors,
        lam=float(lam),
        active=np.zeros(0, dtype=int),
        gamma=np.zeros(dictionary.n),
        sigma=np.zeros((0, 0)),
        mu=np.zeros(0),
        S=dictionary.column_sq_norms / lam,
        Q=phi.T @ y / lam,
        tau=tau,
        tol=tol,
        objective=dictionary.m * np.log(lam) + float(y @ y) / lam,
    )


def fml_initialize(dictionary: Dictionary, y, lam, priors: HyperPriors, tau=0.1, tol=1e-4) -> FmlState:
    """Empty model plus the column most correlated with y.

    The first coordinate enters through the same bordering update as any later
    addition, which yields exactly the one-column posterior and S/Q values.
    """
    st = empty_state(dictionary, y, lam, priors, tau, tol)
    corr = np.abs(dictionary.phi.T @ st.y)
    if not np.any(corr > 0):
        return st
    j = int(np.argmax(corr))
    s, q = st.S[j], st.Q[j]
    g = select_gamma(stationary_points(s, q, priors.a[j], priors.b[j]), s, q, priors.a[j], priors.b[j])
    if g <= tau:
        return st
    act = CandidateAction(j, ADD, g, -ell_gamma_j(g, s, q, priors.a[j], priors.b[j]))
    return apply_action(st, act)


def _classify(in_model, g_new, tau):
    if in_model:
        return REESTIMATE if g_new > tau else DELETE
    return ADD if g_new > tau else NOOP


def propose_action(state: FmlState, j) -> CandidateAction:
    s_all, q_all = state.sq()
    a, b = state.priors.a[j], state.priors.b[j]
    s, q = s_all[j], q_all[j]
    g = select_gamma(stationary_points(s, q, a, b), s, q, a, b)
    in_model = state.gamma[j] > 0
    kind = _classify(in_model, g, state.tau)
    return CandidateAction(int(j), kind, g if kind != DELETE else 0.0, _delta(kind, state.gamma[j], g, s, q, a, b))


def _delta(kind, g_old, g_new, s, q, a, b):
    if kind == REESTIMATE:
        return float(ell_gamma_j(g_old, s, q, a, b) - ell_gamma_j(g_new, s, q, a, b))
    if kind == ADD:
        return float(-ell_gamma_j(g_new, s, q, a, b))
    if kind == DELETE:
        return float(ell_gamma_j(g_old, s, q, a, b))
    return 0.0


def propose_all(state: FmlState):
    """Proposed variance, action code and improvement for every coordinate.

    Returns (gamma_new, kind_code, delta) with codes 0 reestimate, 1 add,
    2 delete, 3 no-op.
    """
    s, q = state.sq()
    a, b = state.priors.a, state.priors.b
    g_new = select_gamma_batch(s, q, a, b)
    g_old = state.gamma
    in_model = g_old > 0
    up = g_new > state.tau
    code = np.where(in_model, np.where(up, 0, 2), np.where(up, 1, 3))
    l_new = ell_gamma_j(np.where(up, g_new, 0.0), s, q, a, b)
    l_old = ell_gamma_j(g_old, s, q, a, b)
    with np.errstate(invalid="ignore"):
        delta = np.select([code == 0, code == 1, code == 2], [l_old - l_new, -l_new, l_old], 0.0)
    delta = np.where(np.isfinite(delta), delta, -np.inf)
    return g_new, code, delta


_KINDS = (REESTIMATE, ADD, DELETE, NOOP)


def best_action(state: FmlState) -> CandidateAction:
    g_new, code, delta = propose_all(state)
    j = int(np.argmax(delta))
    kind = _KINDS[code[j]]
    return CandidateAction(j, kind, float(g_new[j]) if kind != DELETE else 0.0, float(delta[j]))


def apply_action(state: FmlState, action: CandidateAction) -> FmlState:
    """Rank-one update of (Sigma, mu, S, Q) for one add, delete or re-estimate."""
    kind, j = action.kind, action.index
    if kind == NOOP:
        return state
    phi = state.dictionary.phi
    lam = state.lam
    T = state.active
    sigma, mu = state.sigma, state.mu
    gamma = state.gamma.copy()
    p = state.position(j)
    if kind in (REESTIMATE, DELETE):
        if p < 0:
            raise DomainError(f"coordinate {j} is not in the model")
        sp = sigma[:, p]
        v = phi.T @ (phi[:, T] @ sp) / lam
        if kind == REESTIMATE:
            delta_inv = 1.0 / action.gamma_new - 1.0 / gamma[j]
            kappa = delta_inv / (1.0 + delta_inv * sp[p])
            sigma = sigma - kappa * np.outer(sp, sp)
            mu = mu - kappa * mu[p] * sp
            S = state.S + kappa * v**2
            Q = state.Q + kappa * state.mu[p] * v
            gamma[j] = action.gamma_new
            active = T
        else:
            kappa = 1.0 / sp[p]
            keep = np.arange(T.size) != p
            sigma = (sigma - kappa * np.outer(sp, sp))[np.ix_(keep, keep)]
            mu = (mu - kappa * mu[p] * sp)[keep]
            S = state.S + kappa * v**2
            Q = state.Q + kappa * state.mu[p] * v
            gamma[j] = 0.0
            active = T[keep]
    elif kind == ADD:
        if p >= 0:
            raise DomainError(f"coordinate {j} is already in the model")
        phj = phi[:, j]
        Sj, Qj = state.S[j], state.Q[j]
        omega = 1.0 / (1.0 / action.gamma_new + Sj)
        u = sigma @ (phi[:, T].T @ phj)
        e = phi.T @ (phj - phi[:, T] @ u / lam) / lam
        t = T.size
        new_sigma = np.empty((t + 1, t + 1))
        new_sigma[:t, :t] = sigma + (omega / lam**2) * np.outer(u, u)
        new_sigma[:t, t] = new_sigma[t, :t] = -(omega / lam) * u
        new_sigma[t, t] = omega
        sigma = new_sigma
        mu = np.append(mu - (omega * Qj / lam) * u, omega * Qj)
        S = state.S - omega * e**2
        Q = state.Q - omega * Qj * e
        gamma[j] = action.gamma_new
        active = np.append(T, j)
    else:
        raise ValueError(f"unknown action kind {kind!r}")
    sigma = 0.5 * (sigma + sigma.T)
    return replace(
        state,
        active=active,
        gamma=gamma,
        sigma=sigma,
        mu=mu,
        S=S,
        Q=Q,
        objective=state.objective - action.delta,
    )


def state_mismatch(state: FmlState) -> float:
    """Largest normwise relative gap between the carried and recomputed (Sigma, mu, S, Q)."""
    T = state.active
    sigma, mu, S, Q = dense_statistics(state.dictionary, state.y, T, state.gamma[T], state.lam)
    worst = 0.0
    for got, ref in ((state.sigma, sigma), (state.mu, mu), (state.S, S), (state.Q, Q)):
        den = max(np.linalg.norm(ref), 1e-300)
        worst = max(worst, float(np.linalg.norm(got - ref) / den) if ref.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class FmlOptions:
    tau: float = 0.1
    tol: float = 1e-4
    max_actions: int | None = None  # default 100 * N
    learn_lambda: bool = False
    lambda_every: int = 10
    lambda_floor: float = 1e-12
    verify: bool = False
    verify_rtol: float = 1e-8
    # "delta": stop when the best decrease is <= tol * (|objective| + 1);
    # "mu": stop when an action moves the dense posterior mean by < tol
    stop: str = "delta"

    def __post_init__(self):
        if not (self.tau > 0 and self.tol > 0):
            raise DomainError("tau and tol must be positive")
        if self.stop not in ("delta", "mu"):
            raise DomainError(f"unknown stopping rule {self.stop!r}")


@dataclass
class FmlTrace:
    actions: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    times: list = field(default_factory=list)
    sizes: list = field(default_factory=list)


def _reestimate_lambda(state: FmlState, floor) -> FmlState:
    T = state.active
    phi_t = state.dictionary.phi[:, T]
    r = state.y - phi_t @ state.mu
    tr = state.lam * float(np.sum(1.0 - np.diag(state.sigma) / state.gamma[T]))
    lam = max((float(r @ r) + tr) / state.dictionary.m, floor)
    return rebuild(replace(state, lam=lam))


def _dense(state):
    x = np.zeros(state.n)
    x[state.active] = state.mu
    return x


def _verify_enabled(opts):
    return opts.verify or os.environ.get("SBLDF_FML_VERIFY", "") not in ("", "0")


def solve_fml(dictionary: Dictionary, y, priors: HyperPriors, lam, opts: FmlOptions = FmlOptions(), callback=None) -> SblEstimate:
    """Greedy coordinate-wise evidence maximization.

    Each step sweeps all coordinates, takes the action with the largest
    decrease in the objective and applies it by rank-one update. Stops when
    the best decrease is at most ``tol * (|objective| + 1)``, or, with
    ``stop="mu"``, when no action improves or an action moves the dense
    posterior mean by less than ``tol``.

    ``callback(before, action, after)`` is invoked after every accepted action.
    """
    y = np.asarray(y, dtype=float)
    m, n = dictionary.phi.shape
    if y.shape != (m,):
        raise DomainError(f"y has shape {y.shape}, expected ({m},)")
    if priors.n != n:
        raise DomainError(f"priors cover {priors.n} coordinates, dictionary has {n}")
    cap = opts.max_actions if opts.max_actions is not None else 100 * n
    verify = _verify_enabled(opts)
    tr = FmlTrace()
    t0 = time.perf_counter()
    state = fml_initialize(dictionary, y, lam, priors, opts.tau, opts.tol)
    if state.active.size:
        # the bordering update tracks the objective relative to the empty model
        state.objective = objective(state)
    tr.times.append(time.perf_counter() - t0)
    tr.sizes.append(state.active.size)
    tr.objectives.append(state.objective)
    converged = False
    count = 0
    while count < cap:
        t0 = time.perf_counter()
        try:
            act = best_action(state)
        except NumericalFailure:
            state = rebuild(state)
            act = best_action(state)
        floor = opts.tol * (abs(state.objective) + 1.0) if opts.stop == "delta" else 0.0
        if not act.delta > floor:
            converged = True
            break
        before = state
        state = apply_action(state, act)
        count += 1
        if opts.stop == "mu":
            moved = float(np.linalg.norm(_dense(state) - _dense(before)))
        if verify:
            gap = state_mismatch(state)
            if gap > opts.verify_rtol:
                raise NumericalFailure(f"rank-one update drifted from recomputation by {gap:.3g} after {act}")
        if opts.learn_lambda and count % opts.lambda_every == 0:
            state = _reestimate_lambda(state, opts.lambda_floor)
        tr.actions.append(act)
        tr.objectives.append(state.objective)
        tr.times.append(time.perf_counter() - t0)
        tr.sizes.append(state.active.size)
        if callback is not None:
            callback(before, act, state)
        if opts.stop == "mu" and moved < opts.tol:
            converged = True
            break
    if opts.learn_lambda:
        state = _reestimate_lambda(state, opts.lambda_floor)
    else:
        state = rebuild(state)
    return state.to_estimate(
        iterations=count,
        actions=count,
        objective_trace=tr.objectives,
        converged=converged,
        active_sizes=tr.sizes,
        iter_times=tr.times,
    )
