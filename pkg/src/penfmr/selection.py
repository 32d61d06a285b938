"""Tuning-parameter and component-count selection via BIC.

The tuning pair (lambda, gamma) minimizes -2*loglik + log(count)*dim(beta),
where dim counts the nonzero slope estimates and count is the number of
mixture units (observations for plain mixtures, species for archetype
models). The component count K minimizes the analogous criterion where dim
counts all nonzero parameters.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError
from .model import Dataset, FmrParams
from .penalties import PenaltySpec, adaptive_weights
from .sam import SamDataset, sam_fit
from .solver import FitControl, FitResult, fit


@dataclass(frozen=True)
class TuningGrid:
    """Grid over the tuning axes.

    When ``lambdas`` is empty the lambda axis is built per weight
    configuration as ``n_lambdas`` log-spaced values from a bisected
    lambda_max down to ``lambda_min_ratio * lambda_max``. The gamma axis
    applies to the adaptive families; ``ridge_lambdas`` is the second tuning
    axis of the per-component elastic-net comparators.
    """

    lambdas: tuple = ()
    n_lambdas: int = 50
    lambda_min_ratio: float = 1e-4
    gammas: tuple = (0.5, 1.0, 2.0)
    ridge_lambdas: tuple = (0.001, 0.01, 0.1)
    sample_size_for_bic: str = "n"

    def __post_init__(self):
        if self.lambdas:
            lams = tuple(float(l) for l in self.lambdas)
            if any(l <= 0 for l in lams):
                raise ValueError("lambdas must be strictly positive")
            if list(lams) != sorted(lams, reverse=True):
                raise ValueError("lambdas must be sorted descending")
            object.__setattr__(self, "lambdas", lams)
        if not self.gammas:
            raise ValueError("gammas must be nonempty")
        if self.sample_size_for_bic not in ("n", "s"):
            raise ValueError("sample_size_for_bic must be 'n' or 's'")


def _is_sam(data) -> bool:
    return isinstance(data, SamDataset)


def _fit_any(data, K, spec, control, init_params=None):
    if _is_sam(data):
        return sam_fit(data, K, spec, control, init_params=init_params)
    return fit(data, K, spec, control, init_params=init_params)


def _mixture_unit_count(data, grid: TuningGrid) -> int:
    if grid.sample_size_for_bic == "s":
        if not _is_sam(data):
            raise ValueError("sample_size_for_bic 's' needs species data")
        return data.s
    return data.s if _is_sam(data) else data.n


def bic_tuning(fit_result: FitResult, data, bic_count: int) -> float:
    """-2*loglik plus log(bic_count) per nonzero slope estimate."""
    return -2.0 * fit_result.loglik + math.log(bic_count) * fit_result.n_nonzero


def _reseed_zeros(params, beta_tilde: np.ndarray):
    """Warm-start parameters with dropped coefficients re-entered.

    An exactly-zero start would be frozen by the first LQA pass, so
    coefficients the previous path point removed are re-seeded at their
    unpenalized estimates, giving each of them a chance at every lambda.
    """
    beta = np.where(params.beta != 0.0, params.beta, beta_tilde)
    return replace(params, beta=beta)


def find_lambda_max(data, K: int, make_spec, control: FitControl,
                    base_params, beta_tilde, rtol: float = 0.01) -> float:
    """Smallest lambda (within ``rtol``) that freezes every coefficient.

    Bisection in log space; no closed form exists for the square-root
    penalty's activation point, and probe fits at large lambda converge in a
    handful of iterations.
    """
    probe_control = replace(control, max_em_iter=min(control.max_em_iter, 200))

    def all_zero(lam: float) -> bool:
        try:
            res = _fit_any(data, K, make_spec(lam), probe_control,
                           init_params=_reseed_zeros(base_params, beta_tilde))
        except NumericalError:
            return False
        return res.n_nonzero == 0

    hi = 1.0
    for _ in range(20):
        if all_zero(hi):
            break
        hi *= 8.0
    else:
        return hi
    lo = hi / 8.0
    while lo > 1e-12 and all_zero(lo):
        hi = lo
        lo /= 8.0
    if lo <= 1e-12:
        return hi
    while hi / lo > 1.0 + rtol:
        mid = math.sqrt(lo * hi)
        if all_zero(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _tuning_axes(penalty_family: str, grid: TuningGrid, beta_tilde):
    """(gamma, ridge_lambda, weights) combinations for one penalty family."""
    if penalty_family in ("MIXGL2", "MIXGL1", "ADL"):
        return [
            (gamma, 0.0, adaptive_weights(beta_tilde, penalty_family, gamma))
            for gamma in grid.gammas
        ]
    return [(1.0, ridge, None) for ridge in grid.ridge_lambdas]


def select_tuning(data, K: int, penalty_family: str,
                  grid: TuningGrid = TuningGrid(),
                  control: FitControl = FitControl(), warm_start: bool = True):
    """Pick (lambda, gamma) by BIC over warm-started lambda paths.

    Fits the unpenalized model once to build the adaptive weights, then walks
    each lambda path in descending order, initializing every fit from the
    previous solution (with dropped coefficients re-seeded). Returns the
    winning spec, its fit and the full BIC table; failed cells are kept in
    the table with ``failed=True`` and excluded from the argmin.
    ``warm_start=False`` fits every cell from fresh multi-start draws instead.
    """
    count = _mixture_unit_count(data, grid)
    base = _fit_any(data, K, PenaltySpec("NONE"), control)
    if penalty_family == "NONE":
        spec = PenaltySpec("NONE")
        row = _table_row(spec, K, base, bic_tuning(base, data, count))
        return spec, base, [row]

    beta_tilde = base.params.beta
    table = []
    best = None
    for gamma, ridge, weights in _tuning_axes(penalty_family, grid, beta_tilde):
        def make_spec(lam):
            return PenaltySpec(penalty_family, lam=lam, gamma=gamma,
                               ridge_lambda=ridge, weights=weights)

        if grid.lambdas:
            lambdas = grid.lambdas
        else:
            lam_max = find_lambda_max(data, K, make_spec, control,
                                      base.params, beta_tilde)
            lambdas = np.geomspace(lam_max, lam_max * grid.lambda_min_ratio,
                                   grid.n_lambdas)
        prev = base.params
        for lam in lambdas:
            spec = make_spec(float(lam))
            init = _reseed_zeros(prev, beta_tilde) if warm_start else None
            try:
                res = _fit_any(data, K, spec, control, init_params=init)
            except NumericalError:
                table.append(_table_row(spec, K, None, math.nan, failed=True))
                continue
            bic = bic_tuning(res, data, count)
            table.append(_table_row(spec, K, res, bic))
            prev = res.params
            if best is None or bic < best[2]:
                best = (spec, res, bic)
    if best is None:
        raise NumericalError("every tuning cell failed")
    return best[0], best[1], table


def _table_row(spec, K, res, bic, failed=False):
    return {
        "lambda": spec.lam,
        "gamma": spec.gamma,
        "ridge_lambda": spec.ridge_lambda,
        "K": K,
        "loglik": res.loglik if res is not None else math.nan,
        "n_nonzero": res.n_nonzero if res is not None else -1,
        "bic": bic,
        "converged": bool(res.converged) if res is not None else False,
        "failed": failed,
    }


def count_nonzero_parameters(fit_result: FitResult, data) -> int:
    """All nonzero parameters: slopes, intercepts, dispersions, free mixing."""
    params = fit_result.params
    K = params.n_components
    n_intercepts = data.s if _is_sam(data) else K
    n_dispersions = 0
    if not _is_sam(data) and data.family.has_dispersion:
        n_dispersions = K
    return fit_result.n_nonzero + n_intercepts + n_dispersions + (K - 1)


def select_num_components(data, K_range, penalty_family: str,
                          grid: TuningGrid = TuningGrid(),
                          control: FitControl = FitControl()):
    """Choose K by BIC over the candidate interval.

    For each K the best penalized model is found with ``select_tuning``;
    the outer criterion charges log(count) for every nonzero parameter
    (slopes, all intercepts, dispersions where estimated, and K-1 free
    mixing proportions). Returns (best K, per-K best fits, BIC table).
    """
    K_lo, K_hi = int(K_range[0]), int(K_range[-1])
    if K_lo < 1 or K_hi > 20 or K_lo > K_hi:
        raise ValueError("K_range must lie within [1, 20]")
    count = _mixture_unit_count(data, grid)
    fits = {}
    rows = []
    best_K = None
    best_bic = math.inf
    for K in range(K_lo, K_hi + 1):
        try:
            spec, res, table = select_tuning(data, K, penalty_family, grid,
                                             control)
        except NumericalError:
            rows.append({"K": K, "loglik": math.nan, "dim": -1,
                         "bic_k": math.nan, "failed": True})
            continue
        dim = count_nonzero_parameters(res, data)
        bic_k = -2.0 * res.loglik + math.log(count) * dim
        fits[K] = (spec, res, table)
        rows.append({"K": K, "loglik": res.loglik, "dim": dim,
                     "bic_k": bic_k, "failed": False})
        if bic_k < best_bic:
            best_K, best_bic = K, bic_k
    if best_K is None:
        raise NumericalError("no component count could be fitted")
    return best_K, fits, rows
