"""Species archetype models: mixtures over species with species-specific
intercepts and shared archetype-level slopes.

Each species j carries its own intercept so archetypes cluster species by the
shape of their environmental response rather than by prevalence. The mixture
unit is the species: responsibilities are s x K and the penalty scales with
the species count.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DimensionMismatchError, IsolatedSpeciesWarning
from .model import ETA_CLAMP, apply_standardization, standardize
from .penalties import PenaltySpec, lqa_coefficients, penalty_value
from .solver import (
    FitControl,
    FitResult,
    _post_freeze,
    _solve_with_rescue,
    _update_mixing,
    run_multistart_em,
)

# Logit-scale cap for intercepts of all-absent/all-present species.
INTERCEPT_CAP = 10.0


@dataclass(frozen=True)
class DesignTransform:
    """Standardization recipe for covariates, with optional quadratic terms.

    Quadratic terms square the standardized columns and re-standardize the
    squares, so new sites can be mapped onto the training scale exactly.
    """

    linear_stats: np.ndarray
    quad_stats: np.ndarray = None

    @property
    def quadratic(self) -> bool:
        return self.quad_stats is not None

    def apply(self, raw_X: np.ndarray) -> np.ndarray:
        Z = apply_standardization(raw_X, self.linear_stats)
        if not self.quadratic:
            return Z
        Q = apply_standardization(Z ** 2, self.quad_stats)
        return np.hstack([Z, Q])

    @classmethod
    def fit(cls, raw_X: np.ndarray, quadratic: bool = False):
        Z, stats1 = standardize(raw_X)
        if not quadratic:
            return Z, cls(linear_stats=stats1)
        Q, stats2 = standardize(Z ** 2)
        return np.hstack([Z, Q]), cls(linear_stats=stats1, quad_stats=stats2)


def quadratic_term_names(names) -> tuple:
    return tuple(names) + tuple(f"{name}^2" for name in names)


@dataclass(frozen=True)
class SamDataset:
    """Presence-absence matrix with standardized site covariates."""

    Y: np.ndarray                  # n sites x s species, entries in {0, 1}
    X: np.ndarray                  # n x p standardized covariates
    species_names: tuple = ()
    site_ids: tuple = ()
    column_names: tuple = ()
    transform: DesignTransform = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        if Y.ndim != 2 or X.ndim != 2 or Y.shape[0] != X.shape[0]:
            raise DimensionMismatchError("Y must be n x s and X n x p")
        if not np.all((Y == 0.0) | (Y == 1.0)):
            raise ValueError("presence-absence entries must be 0 or 1")
        if not self.species_names:
            object.__setattr__(
                self, "species_names",
                tuple(f"sp{j + 1}" for j in range(Y.shape[1])))
        elif len(self.species_names) != Y.shape[1]:
            raise DimensionMismatchError("species_names length must match s")
        if not self.site_ids:
            object.__setattr__(
                self, "site_ids", tuple(str(i + 1) for i in range(Y.shape[0])))
        elif len(self.site_ids) != Y.shape[0]:
            raise DimensionMismatchError("site_ids length must match n")
        if not self.column_names:
            object.__setattr__(
                self, "column_names",
                tuple(f"x{j + 1}" for j in range(X.shape[1])))
        deg = self.degenerate_species
        if deg.any():
            names = [self.species_names[j] for j in np.nonzero(deg)[0]]
            warnings.warn(
                f"species with all-absent or all-present records: {names}; "
                f"their intercepts will be clamped to +/-{INTERCEPT_CAP}",
                IsolatedSpeciesWarning,
            )

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def s(self) -> int:
        return self.Y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def degenerate_species(self) -> np.ndarray:
        colsum = self.Y.sum(axis=0)
        return (colsum == 0) | (colsum == self.n)

    @classmethod
    def from_raw(cls, raw_X, Y, species_names=(), site_ids=(),
                 column_names=(), quadratic: bool = False):
        X, transform = DesignTransform.fit(np.asarray(raw_X, dtype=float),
                                           quadratic=quadratic)
        if quadratic:
            base = column_names or tuple(
                f"x{j + 1}" for j in range(np.asarray(raw_X).shape[1]))
            column_names = quadratic_term_names(base)
        return cls(Y=Y, X=X, species_names=species_names, site_ids=site_ids,
                   column_names=column_names, transform=transform)


@dataclass(frozen=True)
class SamParams:
    """Archetype slopes, species-specific intercepts and mixing proportions."""

    beta: np.ndarray               # K x p
    species_intercepts: np.ndarray  # length s
    mixing: np.ndarray             # length K

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "species_intercepts",
                           np.asarray(self.species_intercepts, dtype=float))
        object.__setattr__(self, "mixing", np.asarray(self.mixing, dtype=float))
        if self.mixing.shape != (beta.shape[0],):
            raise DimensionMismatchError("mixing length must equal K")
        if np.any(self.mixing <= 0) or abs(self.mixing.sum() - 1.0) > 1e-12:
            raise ValueError("mixing proportions must be positive and sum to 1")

    @property
    def n_components(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    # mixture bookkeeping shared with FmrParams consumers
    @property
    def intercepts(self) -> np.ndarray:
        return self.species_intercepts

    @property
    def dispersions(self) -> np.ndarray:
        return np.ones(self.n_components)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "species_intercepts": self.species_intercepts.tolist(),
            "mixing": self.mixing.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamParams":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            species_intercepts=np.asarray(d["species_intercepts"], dtype=float),
            mixing=np.asarray(d["mixing"], dtype=float),
        )


def _species_component_loglik(params: SamParams, data: SamDataset) -> np.ndarray:
    """s x K matrix of per-species Bernoulli log-likelihood sums over sites."""
    if params.p != data.p or params.species_intercepts.shape[0] != data.s:
        raise DimensionMismatchError("params and data shapes disagree")
    A = data.X @ params.beta.T                      # n x K
    eta = np.clip(A[:, :, None] + params.species_intercepts[None, None, :],
                  -ETA_CLAMP, ETA_CLAMP)            # n x K x s
    yterm = np.einsum("ij,ikj->jk", data.Y, eta)
    softplus = np.logaddexp(0.0, eta).sum(axis=0).T
    return yterm - softplus


def sam_log_likelihood(params: SamParams, data: SamDataset) -> float:
    """Observed log-likelihood of the species mixture, reduced in log space."""
    L = _species_component_loglik(params, data)
    return float(logsumexp(np.log(params.mixing)[None, :] + L, axis=1).sum())


def sam_e_step(params: SamParams, data: SamDataset) -> np.ndarray:
    """Species-level responsibilities tau_jk, rows summing to one."""
    logw = np.log(params.mixing)[None, :] + _species_component_loglik(params, data)
    logw -= logsumexp(logw, axis=1, keepdims=True)
    return np.exp(logw)


def sam_penalized_objective(params: SamParams, data: SamDataset,
                            spec: PenaltySpec) -> float:
    return sam_log_likelihood(params, data) - penalty_value(
        params.beta, spec, data.s, params.mixing)


def _surrogate_species_terms(beta, b0, data, tau):
    """Per-species weighted complete-data log-likelihood, length s."""
    A = data.X @ beta.T
    eta = np.clip(A[:, :, None] + b0[None, None, :], -ETA_CLAMP, ETA_CLAMP)
    per = np.einsum("ij,ikj->jk", data.Y, eta) - np.logaddexp(0.0, eta).sum(axis=0).T
    return (tau * per).sum(axis=1)


def _sam_m_step(data: SamDataset, tau: np.ndarray, spec: PenaltySpec,
                params_current: SamParams, zero_mask: np.ndarray,
                control: FitControl):
    """Joint block-IRLS update of species intercepts and archetype slopes."""
    n, s, p = data.n, data.s, data.p
    K = tau.shape[1]
    if tau.shape[0] != s:
        raise DimensionMismatchError("responsibilities must be s x K")
    if zero_mask is None:
        zero_mask = np.zeros((K, p), dtype=bool)

    nk = tau.sum(axis=0)
    pi_old = params_current.mixing if params_current is not None else None
    beta_cur = params_current.beta if params_current is not None else None
    mixing = _update_mixing(nk, s, spec, beta_cur, pi_old, control.pi_floor)

    if params_current is None:
        d = np.zeros((K, p))
        frozen = zero_mask.copy()
        beta = np.zeros((K, p))
        with np.errstate(divide="ignore"):
            prev = np.clip(data.Y.mean(axis=0), 1.0 / (4 * n), 1 - 1.0 / (4 * n))
        b0 = np.log(prev / (1.0 - prev))
    else:
        d, frozen = lqa_coefficients(beta_cur, spec, s, mixing, zero_mask)
        beta = params_current.beta.copy()
        beta[frozen] = 0.0
        b0 = params_current.species_intercepts.copy()

    deg = data.degenerate_species
    d_safe = np.where(np.isfinite(d), d, 0.0)

    def slope_objective(k, beta_k, eta=None):
        if eta is None:
            eta = np.clip(data.X @ beta_k[:, None] + b0[None, :],
                          -ETA_CLAMP, ETA_CLAMP)
        per = (data.Y * eta - np.logaddexp(0.0, eta)).sum(axis=0)
        return float(tau[:, k] @ per - 0.5 * (d_safe[k] * beta_k ** 2).sum())

    for _ in range(control.max_irls_iter):
        moved = 0.0
        # slopes, one archetype at a time
        for k in range(K):
            active = np.nonzero(~frozen[k])[0]
            if active.size == 0:
                continue
            Xa = data.X[:, active]
            eta = np.clip(Xa @ beta[k, active][:, None] + b0[None, :],
                          -ETA_CLAMP, ETA_CLAMP)   # n x s
            mu = expit(eta)
            u = (data.Y - mu) @ tau[:, k]
            v = (mu * (1.0 - mu)) @ tau[:, k]
            grad = Xa.T @ u - d_safe[k, active] * beta[k, active]
            H = (Xa.T * v) @ Xa
            H[np.diag_indices_from(H)] += d_safe[k, active]
            delta = _solve_with_rescue(H, grad)
            f0 = slope_objective(k, beta[k], eta=eta)
            step = 1.0
            for _ in range(30):
                cand = beta[k].copy()
                cand[active] = beta[k, active] + step * delta
                if slope_objective(k, cand) >= f0 - 1e-12:
                    moved = max(moved, float(np.max(np.abs(step * delta))))
                    beta[k] = cand
                    break
                step *= 0.5

        # species intercepts, all at once
        A = data.X @ beta.T
        eta = np.clip(A[:, :, None] + b0[None, None, :], -ETA_CLAMP, ETA_CLAMP)
        mu = expit(eta)
        resid = data.Y[:, None, :] - mu
        g = np.einsum("jk,ikj->j", tau, resid)
        h = np.einsum("jk,ikj->j", tau, mu * (1.0 - mu))
        delta0 = g / np.maximum(h, 1e-10)
        per0 = (np.einsum("ij,ikj->jk", data.Y, eta)
                - np.logaddexp(0.0, eta).sum(axis=0).T)
        f0 = (tau * per0).sum(axis=1)
        step = np.ones(s)
        cand = b0
        for _ in range(30):
            cand = b0 + step * delta0
            cand = np.where(deg, np.clip(cand, -INTERCEPT_CAP, INTERCEPT_CAP), cand)
            f1 = _surrogate_species_terms(beta, cand, data, tau)
            bad = f1 < f0 - 1e-12
            if not bad.any():
                break
            step[bad] *= 0.5
        else:
            f1 = _surrogate_species_terms(beta, cand, data, tau)
            cand = np.where(f1 >= f0 - 1e-12, cand, b0)
        moved = max(moved, float(np.max(np.abs(cand - b0))))
        b0 = cand

        scale = 1.0 + max(float(np.max(np.abs(beta))), float(np.max(np.abs(b0))))
        if moved < control.irls_tol * scale:
            break

    beta, frozen = _post_freeze(beta, frozen, spec)
    params = SamParams(beta=beta, species_intercepts=b0, mixing=mixing)
    return params, frozen


def sam_fit(data: SamDataset, K: int, spec: PenaltySpec,
            control: FitControl = FitControl(), init_params: SamParams = None,
            init_responsibilities: np.ndarray = None) -> FitResult:
    """Fit a penalized species archetype model by multi-start EM.

    Restart responsibilities are drawn per species from a flat Dirichlet.
    Returns a FitResult whose ``responsibilities`` are s x K.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if spec.is_adaptive and spec.lam > 0 and spec.weights is None:
        raise ValueError(f"{spec.family} at lambda > 0 requires adaptive weights")

    none_spec = PenaltySpec(family="NONE")

    def initial_m_step(tau0):
        return _sam_m_step(data, tau0, none_spec, None, None, control)

    def m_step_fn(tau, params, mask):
        return _sam_m_step(data, tau, spec, params, mask, control)

    params, trace, converged, mask, idx, n_failed = run_multistart_em(
        data.s, K, control, init_params, init_responsibilities,
        initial_m_step, m_step_fn,
        lambda params: sam_e_step(params, data),
        lambda params: sam_penalized_objective(params, data, spec),
    )

    loglik = sam_log_likelihood(params, data)
    pen = penalty_value(params.beta, spec, data.s, params.mixing)
    return FitResult(
        params=params,
        responsibilities=sam_e_step(params, data),
        loglik=loglik,
        penalized_objective=loglik - pen,
        n_nonzero=int(np.count_nonzero(params.beta)),
        objective_trace=trace,
        converged=converged,
        start_index=idx,
        n_failed_starts=n_failed,
        zero_mask=mask if mask is not None else (params.beta == 0.0),
    )


def archetype_linear_predictor(fit_result: FitResult, X_new: np.ndarray) -> np.ndarray:
    """Per-site archetype linear predictors for mapping.

    The intercept of archetype k is the responsibility-weighted average of
    the species intercepts; ``X_new`` must already be on the training
    standardization scale.
    """
    params = fit_result.params
    tau = fit_result.responsibilities
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim != 2 or X_new.shape[1] != params.p:
        raise DimensionMismatchError("X_new must be m x p")
    weights = tau.sum(axis=0)
    avg_intercepts = (tau * params.species_intercepts[:, None]).sum(axis=0) / weights
    return avg_intercepts[None, :] + X_new @ params.beta.T
