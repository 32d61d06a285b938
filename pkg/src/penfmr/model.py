"""Core mixture-of-regressions model: response families, datasets, parameters,
component log-densities and the observed-data log-likelihood.

All functions here are pure and all containers are frozen dataclasses, so they
are safe to share across concurrently running fits.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from .errors import (
    ConstantColumnError,
    DimensionMismatchError,
    InvalidResponseError,
)

# Linear predictors beyond this magnitude are evaluated in the saturated limit.
ETA_CLAMP = 700.0


@dataclass(frozen=True)
class ResponseFamily:
    """Exponential-family response with its canonical link.

    ``binomial`` (logit link, fixed dispersion 1) carries a trial size;
    ``bernoulli`` is binomial with trial size 1. ``gaussian`` (identity link)
    carries a per-component dispersion estimated during fitting.
    """

    kind: str
    trial_size: int = 1

    def __post_init__(self):
        if self.kind not in ("binomial", "bernoulli", "gaussian"):
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.kind == "bernoulli" and self.trial_size != 1:
            raise ValueError("bernoulli family has trial size 1")
        if self.kind == "binomial" and self.trial_size < 1:
            raise ValueError("binomial trial size must be >= 1")

    @property
    def is_binomial(self) -> bool:
        return self.kind in ("binomial", "bernoulli")

    @property
    def has_dispersion(self) -> bool:
        return self.kind == "gaussian"

    def validate_response(self, y: np.ndarray) -> None:
        if not np.all(np.isfinite(y)):
            raise InvalidResponseError("response contains non-finite values")
        if self.is_binomial:
            m = self.trial_size
            if np.any(y < 0) or np.any(y > m):
                raise InvalidResponseError(
                    f"binomial responses must lie in [0, {m}]"
                )
            if np.any(y != np.round(y)):
                raise InvalidResponseError("binomial responses must be integer counts")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "trial_size": self.trial_size}

    @classmethod
    def from_dict(cls, d: dict) -> "ResponseFamily":
        return cls(kind=d["kind"], trial_size=int(d.get("trial_size", 1)))


def standardize(raw_X: np.ndarray):
    """Center and scale each column to sample mean 0 and variance 1.

    The scale uses the n-1 denominator. Returns the standardized matrix and a
    (p, 2) array of per-column (mean, sd) sufficient to invert the transform.

    Raises ConstantColumnError for a zero-variance column and
    DimensionMismatchError when fewer than two rows are supplied.
    """
    X = np.asarray(raw_X, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatchError("design matrix must be two-dimensional")
    n = X.shape[0]
    if n < 2:
        raise DimensionMismatchError("standardization needs at least 2 rows")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    for j, s in enumerate(sd):
        if s == 0.0 or not np.isfinite(s):
            raise ConstantColumnError(j)
    stats = np.column_stack([mean, sd])
    return (X - mean) / sd, stats


def apply_standardization(raw_X: np.ndarray, stats: np.ndarray) -> np.ndarray:
    """Apply previously recorded (mean, sd) column statistics to new rows."""
    X = np.asarray(raw_X, dtype=float)
    if X.shape[1] != stats.shape[0]:
        raise DimensionMismatchError("column count does not match recorded stats")
    return (X - stats[:, 0]) / stats[:, 1]


@dataclass(frozen=True)
class Dataset:
    """Standardized design matrix with its response and family metadata."""

    X: np.ndarray
    y: np.ndarray
    family: ResponseFamily
    column_names: tuple = ()
    standardization_stats: np.ndarray = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DimensionMismatchError("X must be n x p and y length n")
        if not self.column_names:
            object.__setattr__(
                self, "column_names", tuple(f"x{j + 1}" for j in range(X.shape[1]))
            )
        elif len(self.column_names) != X.shape[1]:
            raise DimensionMismatchError("column_names length must match p")
        else:
            object.__setattr__(self, "column_names", tuple(self.column_names))
        self.family.validate_response(y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_raw(cls, raw_X, y, family, column_names=()):
        X, stats = standardize(raw_X)
        return cls(X=X, y=y, family=family, column_names=column_names,
                   standardization_stats=stats)


@dataclass(frozen=True)
class FmrParams:
    """Full parameter set of a K-component mixture of regressions."""

    beta: np.ndarray            # K x p slopes
    intercepts: np.ndarray      # length K
    dispersions: np.ndarray     # length K, all 1 for binomial families
    mixing: np.ndarray          # length K, on the simplex

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "intercepts", np.asarray(self.intercepts, dtype=float))
        object.__setattr__(self, "dispersions", np.asarray(self.dispersions, dtype=float))
        object.__setattr__(self, "mixing", np.asarray(self.mixing, dtype=float))
        K = beta.shape[0]
        if self.intercepts.shape != (K,) or self.dispersions.shape != (K,) \
                or self.mixing.shape != (K,):
            raise DimensionMismatchError("parameter blocks disagree on K")
        if np.any(self.mixing <= 0) or abs(self.mixing.sum() - 1.0) > 1e-12:
            raise ValueError("mixing proportions must be positive and sum to 1")
        if np.any(self.dispersions <= 0):
            raise ValueError("dispersions must be strictly positive")

    @property
    def n_components(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    def permuted(self, order) -> "FmrParams":
        """Relabel components by ``order`` (rows of every block permuted alike)."""
        idx = np.asarray(order, dtype=int)
        return replace(
            self,
            beta=self.beta[idx],
            intercepts=self.intercepts[idx],
            dispersions=self.dispersions[idx],
            mixing=self.mixing[idx],
        )

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "intercepts": self.intercepts.tolist(),
            "dispersions": self.dispersions.tolist(),
            "mixing": self.mixing.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FmrParams":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            intercepts=np.asarray(d["intercepts"], dtype=float),
            dispersions=np.asarray(d["dispersions"], dtype=float),
            mixing=np.asarray(d["mixing"], dtype=float),
        )


def _binomial_log_density(y, eta, trial_size):
    eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    m = float(trial_size)
    const = gammaln(m + 1.0) - gammaln(y + 1.0) - gammaln(m - y + 1.0)
    return const + y * eta - m * np.logaddexp(0.0, eta)


def _gaussian_log_density(y, eta, phi):
    return -0.5 * np.log(2.0 * np.pi * phi) - (y - eta) ** 2 / (2.0 * phi)


def component_log_density(y, eta, family: ResponseFamily, phi: float = 1.0):
    """Log density of one mixture component at linear predictor ``eta``.

    The binomial value includes the combinatorial constant so densities sum to
    one over the response support. Broadcasts over array arguments.
    """
    if phi <= 0:
        raise ValueError("dispersion must be positive")
    y = np.asarray(y, dtype=float)
    family.validate_response(y)
    eta = np.asarray(eta, dtype=float)
    if family.is_binomial:
        return _binomial_log_density(y, eta, family.trial_size)
    return _gaussian_log_density(y, eta, phi)


def linear_predictors(params: FmrParams, data: Dataset) -> np.ndarray:
    """n x K matrix of clamped linear predictors."""
    if params.p != data.p:
        raise DimensionMismatchError("params and data disagree on p")
    eta = params.intercepts[None, :] + data.X @ params.beta.T
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def component_log_densities(params: FmrParams, data: Dataset) -> np.ndarray:
    """n x K matrix of per-component log densities log f(y_i; mu_ik, phi_k)."""
    eta = linear_predictors(params, data)
    y = data.y[:, None]
    if data.family.is_binomial:
        m = float(data.family.trial_size)
        const = (gammaln(m + 1.0) - gammaln(data.y + 1.0)
                 - gammaln(m - data.y + 1.0))
        return const[:, None] + y * eta - m * np.logaddexp(0.0, eta)
    phi = params.dispersions[None, :]
    return -0.5 * np.log(2.0 * np.pi * phi) - (y - eta) ** 2 / (2.0 * phi)


def log_likelihood(params: FmrParams, data: Dataset) -> float:
    """Observed-data log-likelihood, reduced with log-sum-exp over components."""
    logf = component_log_densities(params, data)
    return float(logsumexp(np.log(params.mixing)[None, :] + logf, axis=1).sum())


def posterior_responsibilities(params: FmrParams, data: Dataset) -> np.ndarray:
    """n x K posterior component-membership probabilities, rows summing to 1."""
    logw = np.log(params.mixing)[None, :] + component_log_densities(params, data)
    logw -= logsumexp(logw, axis=1, keepdims=True)
    return np.exp(logw)


# -- analytic score ----------------------------------------------------------
#
# Free-parameter packing used by ``score`` and the finite-difference checks:
# intercepts (K), beta row-major (K*p), first K-1 mixing proportions (the last
# is 1 minus their sum), then dispersions (K, gaussian family only).


def pack_free_params(params: FmrParams, family: ResponseFamily) -> np.ndarray:
    parts = [params.intercepts, params.beta.ravel(), params.mixing[:-1]]
    if family.has_dispersion:
        parts.append(params.dispersions)
    return np.concatenate(parts)


def unpack_free_params(vec: np.ndarray, K: int, p: int,
                       family: ResponseFamily) -> FmrParams:
    vec = np.asarray(vec, dtype=float)
    intercepts = vec[:K]
    beta = vec[K:K + K * p].reshape(K, p)
    pi_free = vec[K + K * p:K + K * p + K - 1]
    mixing = np.append(pi_free, 1.0 - pi_free.sum())
    if family.has_dispersion:
        dispersions = vec[K + K * p + K - 1:]
    else:
        dispersions = np.ones(K)
    return FmrParams(beta=beta, intercepts=intercepts,
                     dispersions=dispersions, mixing=mixing)


def score(params: FmrParams, data: Dataset) -> np.ndarray:
    """Gradient of ``log_likelihood`` with respect to the packed free params."""
    K, p = params.n_components, params.p
    tau = posterior_responsibilities(params, data)
    eta = linear_predictors(params, data)
    y = data.y[:, None]
    if data.family.is_binomial:
        m = float(data.family.trial_size)
        dl_deta = y - m * expit(eta)
    else:
        dl_deta = (y - eta) / params.dispersions[None, :]
    weighted = tau * dl_deta
    g_intercepts = weighted.sum(axis=0)
    g_beta = weighted.T @ data.X
    # mixing: d/dpi_k of log sum_m pi_m f_im with pi_K = 1 - sum of the rest
    ratios = tau / params.mixing[None, :]
    g_pi = (ratios[:, :-1] - ratios[:, -1:]).sum(axis=0)
    parts = [g_intercepts, g_beta.ravel(), g_pi]
    if data.family.has_dispersion:
        phi = params.dispersions[None, :]
        dl_dphi = -0.5 / phi + (y - eta) ** 2 / (2.0 * phi ** 2)
        parts.append((tau * dl_dphi).sum(axis=0))
    return np.concatenate(parts)
