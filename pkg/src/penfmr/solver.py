"""EM solver for penalized mixtures of regressions.

The E-step computes posterior responsibilities in log space; the M-step
maximizes the responsibility-weighted complete-data log-likelihood minus the
LQA quadratic surrogate of the penalty, one component at a time, via
Newton/IRLS with step halving. Step halving is what makes every recorded
penalized-objective trace non-decreasing: a raw Newton step on a binomial
GLM can overshoot.

The multi-start/trace machinery is shared with the species-archetype solver
through ``run_multistart_em``.
"""

import threading
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import (
    AllStartsFailedError,
    DimensionMismatchError,
    SingularSystemError,
)
from .model import (
    ETA_CLAMP,
    Dataset,
    FmrParams,
    log_likelihood,
    posterior_responsibilities,
)
from .penalties import (
    PI_WEIGHTED_FAMILIES,
    ZERO_THRESHOLD,
    PenaltySpec,
    _per_component_content,
    lqa_coefficients,
    penalty_value,
)

PHI_FLOOR = 1e-8
RIDGE_RESCUE = 1e-8


@dataclass(frozen=True)
class FitControl:
    """Knobs for the EM and inner IRLS loops."""

    max_em_iter: int = 500
    em_tol: float = 1e-6
    max_irls_iter: int = 25
    irls_tol: float = 1e-8
    n_starts: int = 10
    seed: int = 0
    pi_floor: float = 1e-4

    def __post_init__(self):
        if min(self.em_tol, self.irls_tol, self.pi_floor) <= 0:
            raise ValueError("tolerances must be positive")
        if min(self.max_em_iter, self.max_irls_iter, self.n_starts) < 1:
            raise ValueError("iteration counts must be positive")


@dataclass
class FitResult:
    """Converged parameters plus the diagnostics needed for selection."""

    params: object
    responsibilities: np.ndarray
    loglik: float
    penalized_objective: float
    n_nonzero: int
    objective_trace: np.ndarray
    converged: bool
    start_index: int
    n_failed_starts: int = 0
    zero_mask: np.ndarray = None


# -- ascent bookkeeping -------------------------------------------------------
# Every EM run registers the smallest between-iteration change of its
# penalized-objective trace; the acceptance suite asserts the global minimum
# never drops below -1e-8.

_trace_lock = threading.Lock()
_trace_count = 0
_trace_min_delta = np.inf


def _record_trace(trace: np.ndarray) -> None:
    global _trace_count, _trace_min_delta
    delta = float(np.min(np.diff(trace))) if len(trace) > 1 else np.inf
    with _trace_lock:
        _trace_count += 1
        if delta < _trace_min_delta:
            _trace_min_delta = delta


def trace_stats() -> dict:
    with _trace_lock:
        return {"n_fits": _trace_count, "min_delta": _trace_min_delta}


def reset_trace_stats() -> None:
    global _trace_count, _trace_min_delta
    with _trace_lock:
        _trace_count = 0
        _trace_min_delta = np.inf


# -- linear algebra -----------------------------------------------------------


def _solve_with_rescue(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs, adding one small ridge if A is singular."""
    for attempt in range(2):
        try:
            x = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            x = None
        if x is not None and np.all(np.isfinite(x)):
            return x
        A = A + RIDGE_RESCUE * np.eye(A.shape[0])
    raise SingularSystemError("normal equations singular beyond ridge rescue")


# -- weighted penalized GLM (one mixture component) ---------------------------


def _glm_objective(X1, y, wobs, family, b, phi, d1):
    eta = np.clip(X1 @ b, -ETA_CLAMP, ETA_CLAMP)
    if family.is_binomial:
        m = float(family.trial_size)
        per = y * eta - m * np.logaddexp(0.0, eta)
    else:
        per = -0.5 * np.log(2.0 * np.pi * phi) - (y - eta) ** 2 / (2.0 * phi)
    return float(wobs @ per - 0.5 * (d1 * b ** 2).sum())


def _irls_component(X1, y, wobs, family, d1, b, phi, control):
    """Maximize the weighted component log-likelihood minus the LQA ridge.

    ``X1`` carries the intercept in column 0 and ``d1[0] == 0``. Returns the
    coefficient vector and (for gaussian) the updated dispersion.
    """
    wsum = wobs.sum()
    for _ in range(control.max_irls_iter):
        b_prev = b
        phi_prev = phi
        eta = np.clip(X1 @ b, -ETA_CLAMP, ETA_CLAMP)
        if family.is_binomial:
            m = float(family.trial_size)
            p = expit(eta)
            grad = X1.T @ (wobs * (y - m * p)) - d1 * b
            H = (X1.T * (wobs * m * p * (1.0 - p))) @ X1
            H[np.diag_indices_from(H)] += d1
            delta = _solve_with_rescue(H, grad)
            f0 = _glm_objective(X1, y, wobs, family, b, phi, d1)
            step = 1.0
            for _ in range(30):
                cand = b + step * delta
                if _glm_objective(X1, y, wobs, family, cand, phi, d1) >= f0 - 1e-12:
                    b = cand
                    break
                step *= 0.5
        else:
            A = (X1.T * wobs) @ X1 + phi * np.diag(d1)
            b = _solve_with_rescue(A, X1.T @ (wobs * y))
            resid = y - X1 @ b
            if wsum > 0:
                phi = max(float(wobs @ resid ** 2 / wsum), PHI_FLOOR)
        moved = np.max(np.abs(b - b_prev)) + abs(phi - phi_prev)
        if moved < control.irls_tol * (1.0 + np.max(np.abs(b))):
            break
    return b, phi


# -- mixing-proportion update -------------------------------------------------


def _mixing_block_objective(pi, nk, total, content):
    with np.errstate(divide="ignore"):
        terms = np.where(nk > 0, nk * np.log(pi), 0.0)
    return float(terms.sum() - total * (pi * content).sum())


def _update_mixing(nk, total, spec, beta_current, pi_old, pi_floor):
    """Maximize sum_k nk log pi_k minus the pi-linear penalty part.

    For penalties that scale per component by pi_k, the exact simplex
    maximizer solves pi_k = nk / (nu + total * c_k) with nu chosen so the
    proportions sum to one. The previous value is kept whenever flooring makes
    the candidate worse, preserving the ascent property.
    """
    K = len(nk)
    if spec.family in PI_WEIGHTED_FAMILIES and beta_current is not None:
        content = _per_component_content(np.atleast_2d(beta_current), spec)
    else:
        content = np.zeros(K)
    if content.max() > 0 and np.any(nk > 0):
        tc = total * content
        pos = nk > 0
        tc_min = tc[pos].min()

        def gap(nu):
            return (nk[pos] / (nu + tc[pos])).sum() - 1.0

        lo = -tc_min + max(1e-12, 1e-12 * abs(tc_min))
        while not np.isfinite(gap(lo)):
            lo = -tc_min + 10.0 * (lo + tc_min)
        hi = max(nk.sum() - tc_min, lo + 1.0)
        while gap(hi) > 0:
            hi = 2.0 * hi + 1.0
        nu = brentq(gap, lo, hi, xtol=1e-12, maxiter=200)
        cand = np.where(pos, nk / (nu + tc), 0.0)
    else:
        cand = nk / nk.sum()
    cand = np.maximum(cand, pi_floor)
    cand = cand / cand.sum()
    if pi_old is not None:
        if (_mixing_block_objective(cand, nk, total, content)
                < _mixing_block_objective(pi_old, nk, total, content)):
            return pi_old
    return cand


def _post_freeze(beta, frozen, spec):
    """Freeze coefficients that crossed ZERO_THRESHOLD during the M-step.

    MIXGL2 freezes whole covariate columns (it has no individual-coefficient
    sparsity); the entry-sparse families freeze single coefficients.
    Unpenalized fits never freeze.
    """
    if not spec.induces_sparsity:
        return beta, frozen
    if spec.family == "MIXGL2":
        dead_cols = np.abs(beta).max(axis=0) < ZERO_THRESHOLD
        beta[:, dead_cols] = 0.0
        frozen[:, dead_cols] = True
    else:
        tiny = (np.abs(beta) < ZERO_THRESHOLD) & ~frozen
        beta[tiny] = 0.0
        frozen |= tiny
    return beta, frozen


# -- generic multi-start EM driver ---------------------------------------------


def run_multistart_em(n_units, K, control, init_params, init_responsibilities,
                      initial_m_step, m_step_fn, e_step_fn, objective_fn):
    """Shared restart loop: Dirichlet starts, trace recording, best-run pick.

    ``n_units`` is the number of mixture units (observations for a plain
    mixture, species for an archetype model). The callables close over the
    data, penalty and control. Returns (params, trace, converged, mask,
    start_index, n_failed).
    """
    starts = []
    if init_params is not None or init_responsibilities is not None:
        starts.append((0, init_params, init_responsibilities))
    else:
        seeds = np.random.SeedSequence(control.seed).spawn(control.n_starts)
        for idx, ss in enumerate(seeds):
            starts.append((idx, None, dirichlet_responsibilities(n_units, K, ss)))

    best = None
    n_failed = 0
    last_error = None
    for idx, p0, tau0 in starts:
        try:
            if p0 is not None:
                params, mask = p0, None
            else:
                params, mask = initial_m_step(tau0)
            trace = [objective_fn(params)]
            converged = False
            for _ in range(control.max_em_iter):
                tau = e_step_fn(params)
                params, mask = m_step_fn(tau, params, mask)
                obj = objective_fn(params)
                trace.append(obj)
                if not np.isfinite(obj):
                    raise SingularSystemError("objective became non-finite")
                if abs(obj - trace[-2]) <= control.em_tol * (1.0 + abs(trace[-2])):
                    converged = True
                    break
            trace = np.asarray(trace)
            _record_trace(trace)
        except SingularSystemError as exc:
            n_failed += 1
            last_error = exc
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace, converged, mask, idx)
    if best is None:
        raise AllStartsFailedError(f"all {len(starts)} starts failed: {last_error}")
    params, trace, converged, mask, idx = best
    return params, trace, converged, mask, idx, n_failed


# -- the public solver surface -------------------------------------------------


def dirichlet_responsibilities(n_rows: int, K: int, seed) -> np.ndarray:
    """Rows drawn independently from a flat Dirichlet over K components."""
    rng = np.random.default_rng(seed)
    if K == 1:
        return np.ones((n_rows, 1))
    return rng.dirichlet(np.ones(K), size=n_rows)


def random_initialization(data: Dataset, K: int, seed) -> np.ndarray:
    """Random starting responsibilities, consumed by an initial M-step."""
    return dirichlet_responsibilities(data.n, K, seed)


def e_step(params: FmrParams, data: Dataset) -> np.ndarray:
    """Posterior responsibilities tau_ik, computed in log space."""
    return posterior_responsibilities(params, data)


def m_step(data: Dataset, responsibilities: np.ndarray, spec: PenaltySpec,
           params_current: FmrParams, zero_mask: np.ndarray,
           control: FitControl):
    """One penalized M-step; returns the new parameters and grown zero mask.

    Pass ``params_current=None`` for the initial M-step from random
    responsibilities (no LQA linearization point exists yet, so the step is
    unpenalized and nothing is frozen).
    """
    tau = np.asarray(responsibilities, dtype=float)
    n, p = data.X.shape
    K = tau.shape[1]
    if tau.shape[0] != n:
        raise DimensionMismatchError("responsibilities must be n x K")
    if zero_mask is None:
        zero_mask = np.zeros((K, p), dtype=bool)

    nk = tau.sum(axis=0)
    pi_old = params_current.mixing if params_current is not None else None
    beta_cur = params_current.beta if params_current is not None else None
    mixing = _update_mixing(nk, n, spec, beta_cur, pi_old, control.pi_floor)

    if params_current is None:
        d = np.zeros((K, p))
        frozen = zero_mask.copy()
    else:
        d, frozen = lqa_coefficients(beta_cur, spec, n, mixing, zero_mask)

    beta = np.zeros((K, p))
    intercepts = np.zeros(K)
    dispersions = np.ones(K)
    gaussian = data.family.has_dispersion
    for k in range(K):
        active = np.nonzero(~frozen[k])[0]
        X1 = np.column_stack([np.ones(n), data.X[:, active]])
        d1 = np.concatenate([[0.0], d[k, active]])
        if params_current is not None:
            b = np.concatenate([[params_current.intercepts[k]],
                                params_current.beta[k, active]])
            phi = float(params_current.dispersions[k])
        else:
            b = np.zeros(1 + active.size)
            phi = 1.0
        b, phi = _irls_component(X1, data.y, tau[:, k], data.family, d1, b,
                                 phi, control)
        intercepts[k] = b[0]
        beta[k, active] = b[1:]
        if gaussian:
            dispersions[k] = phi

    beta, frozen = _post_freeze(beta, frozen, spec)
    params = FmrParams(beta=beta, intercepts=intercepts,
                       dispersions=dispersions, mixing=mixing)
    return params, frozen


def penalized_objective(params: FmrParams, data: Dataset,
                        spec: PenaltySpec) -> float:
    """Observed log-likelihood minus the penalty at the current parameters."""
    return log_likelihood(params, data) - penalty_value(
        params.beta, spec, data.n, params.mixing)


def fit(data: Dataset, K: int, spec: PenaltySpec,
        control: FitControl = FitControl(), init_params: FmrParams = None,
        init_responsibilities: np.ndarray = None) -> FitResult:
    """Fit a K-component penalized mixture by multi-start EM.

    By default each of ``control.n_starts`` restarts draws flat-Dirichlet
    responsibilities and begins with an unpenalized M-step. Passing
    ``init_params`` (or ``init_responsibilities``) instead runs a single EM
    from that point, which is how warm starts along a tuning path and the
    restart experiments are driven. Returns the restart with the highest
    penalized objective.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if spec.is_adaptive and spec.lam > 0 and spec.weights is None:
        raise ValueError(f"{spec.family} at lambda > 0 requires adaptive weights")

    none_spec = PenaltySpec(family="NONE")

    def initial_m_step(tau0):
        return m_step(data, tau0, none_spec, None, None, control)

    def m_step_fn(tau, params, mask):
        return m_step(data, tau, spec, params, mask, control)

    params, trace, converged, mask, idx, n_failed = run_multistart_em(
        data.n, K, control, init_params, init_responsibilities,
        initial_m_step, m_step_fn,
        lambda params: e_step(params, data),
        lambda params: penalized_objective(params, data, spec),
    )

    loglik = log_likelihood(params, data)
    pen = penalty_value(params.beta, spec, data.n, params.mixing)
    return FitResult(
        params=params,
        responsibilities=e_step(params, data),
        loglik=loglik,
        penalized_objective=loglik - pen,
        n_nonzero=int(np.count_nonzero(params.beta)),
        objective_trace=trace,
        converged=converged,
        start_index=idx,
        n_failed_starts=n_failed,
        zero_mask=mask if mask is not None else (params.beta == 0.0),
    )
