"""Group-structured penalties for mixtures of regressions.

Two penalties act across components on a per-covariate basis: a grouped
l2-norm penalty (MIXGL2) and a square-root-of-weighted-l1 penalty (MIXGL1).
Comparators: a per-coefficient adaptive lasso (ADL) and two per-component
elastic-net style penalties (MIXLASSO_L2, MIXSCAD_L2). All are maximized via
a local quadratic approximation (LQA) built by ``lqa_coefficients``.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatchError

PENALTY_FAMILIES = ("MIXGL2", "MIXGL1", "ADL", "MIXLASSO_L2", "MIXSCAD_L2", "NONE")
ADAPTIVE_FAMILIES = ("MIXGL2", "MIXGL1", "ADL")
PI_WEIGHTED_FAMILIES = ("MIXLASSO_L2", "MIXSCAD_L2")

# Cap for adaptive weights whose unpenalized estimate is numerically zero.
W_MAX = 1e8
# A coefficient whose magnitude falls below this during an M-step is frozen
# at exactly zero for the remainder of the fit (LQA cannot resurrect it).
ZERO_THRESHOLD = 1e-6


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family with its tuning pair and frozen adaptive weights.

    ``weights`` is per covariate (length p) for MIXGL2 and per coefficient
    (K x p) for MIXGL1/ADL; comparator families use implicit unit weights.
    """

    family: str
    lam: float = 0.0
    gamma: float = 1.0
    ridge_lambda: float = 0.0
    scad_a: float = 3.7
    weights: np.ndarray = None

    def __post_init__(self):
        if self.family not in PENALTY_FAMILIES:
            raise ValueError(f"unknown penalty family {self.family!r}")
        if self.family == "NONE" and self.lam != 0.0:
            raise ValueError("family NONE forces lambda = 0")
        if self.lam < 0 or self.ridge_lambda < 0:
            raise ValueError("tuning parameters must be nonnegative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.scad_a <= 2:
            raise ValueError("SCAD shape parameter must exceed 2")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be nonnegative and finite")
            object.__setattr__(self, "weights", w)

    @property
    def is_adaptive(self) -> bool:
        return self.family in ADAPTIVE_FAMILIES

    @property
    def induces_sparsity(self) -> bool:
        """Whether the penalty is singular at zero, producing exact zeros."""
        return self.family != "NONE" and self.lam > 0

    def with_weights(self, weights) -> "PenaltySpec":
        return replace(self, weights=weights)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "lambda": self.lam,
            "gamma": self.gamma,
            "ridge_lambda": self.ridge_lambda,
            "scad_a": self.scad_a,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltySpec":
        return cls(
            family=d["family"],
            lam=float(d.get("lambda", 0.0)),
            gamma=float(d.get("gamma", 1.0)),
            ridge_lambda=float(d.get("ridge_lambda", 0.0)),
            scad_a=float(d.get("scad_a", 3.7)),
        )


def adaptive_weights(unpenalized_beta: np.ndarray, family: str, gamma: float):
    """Data-dependent weights from the unpenalized estimates.

    MIXGL2 weighs each covariate by the inverse gamma-power of its group
    l2-norm; MIXGL1 and ADL weigh each coefficient by |estimate|^-gamma.
    Weights for numerically-zero estimates are capped at W_MAX.
    """
    beta = np.atleast_2d(np.asarray(unpenalized_beta, dtype=float))
    if family in PI_WEIGHTED_FAMILIES or family == "NONE":
        return np.ones_like(beta)
    with np.errstate(divide="ignore", over="ignore"):
        if family == "MIXGL2":
            norms = np.sqrt((beta ** 2).sum(axis=0))
            w = norms ** (-gamma)
        elif family in ("MIXGL1", "ADL"):
            w = np.abs(beta) ** (-gamma)
        else:
            raise ValueError(f"unknown penalty family {family!r}")
    return np.minimum(np.where(np.isfinite(w), w, W_MAX), W_MAX)


def scad_value(t: np.ndarray, lam: float, a: float) -> np.ndarray:
    """Standard SCAD penalty evaluated at |coefficient| values ``t >= 0``."""
    t = np.asarray(t, dtype=float)
    linear = lam * t
    quad = -(t ** 2 - 2.0 * a * lam * t + lam ** 2) / (2.0 * (a - 1.0))
    flat = (a + 1.0) * lam ** 2 / 2.0
    return np.where(t <= lam, linear, np.where(t <= a * lam, quad, flat))


def scad_derivative(t: np.ndarray, lam: float, a: float) -> np.ndarray:
    """Derivative of the SCAD penalty with respect to |coefficient|."""
    t = np.asarray(t, dtype=float)
    return np.where(
        t <= lam, lam, np.maximum(a * lam - t, 0.0) / (a - 1.0)
    )


def _check_weights(spec: PenaltySpec, beta: np.ndarray) -> np.ndarray:
    K, p = beta.shape
    w = spec.weights
    if w is None:
        if spec.is_adaptive:
            raise ValueError(f"{spec.family} requires adaptive weights")
        return np.ones((K, p))
    if spec.family == "MIXGL2":
        if w.shape != (p,):
            raise DimensionMismatchError("MIXGL2 weights must have length p")
    elif w.shape != (K, p):
        raise DimensionMismatchError("per-coefficient weights must be K x p")
    return w


def _per_component_content(beta, spec):
    """lambda*|beta| (or SCAD) plus ridge content per component, length K."""
    absb = np.abs(beta)
    if spec.family == "MIXLASSO_L2":
        base = spec.lam * absb.sum(axis=1)
    else:
        base = scad_value(absb, spec.lam, spec.scad_a).sum(axis=1)
    return base + spec.ridge_lambda * (beta ** 2).sum(axis=1)


def penalty_value(beta: np.ndarray, spec: PenaltySpec, n: int,
                  mixing: np.ndarray = None) -> float:
    """Total penalty subtracted from the log-likelihood. Zero at beta = 0."""
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    if spec.family == "NONE" or (spec.lam == 0.0 and spec.ridge_lambda == 0.0):
        return 0.0
    w = _check_weights(spec, beta)
    if spec.family == "MIXGL2":
        return float(n * spec.lam * (w * np.sqrt((beta ** 2).sum(axis=0))).sum())
    if spec.family == "MIXGL1":
        return float(n * spec.lam * np.sqrt((w * np.abs(beta)).sum(axis=0)).sum())
    if spec.family == "ADL":
        return float(n * spec.lam * (w * np.abs(beta)).sum())
    if mixing is None:
        raise ValueError(f"{spec.family} requires mixing proportions")
    mixing = np.asarray(mixing, dtype=float)
    if mixing.shape != (beta.shape[0],):
        raise DimensionMismatchError("mixing length must equal K")
    return float(n * (mixing * _per_component_content(beta, spec)).sum())


def lqa_coefficients(beta_current: np.ndarray, spec: PenaltySpec, n: int,
                     mixing: np.ndarray = None, zero_mask: np.ndarray = None):
    """Per-coefficient quadratic weights majorizing the penalty at the iterate.

    Returns ``(d, frozen)`` where the penalty near ``beta_current`` is bounded
    above by ``const + 0.5 * sum d_kl * beta_kl**2`` on the non-frozen set.
    Coefficients whose LQA weight would diverge (magnitude below
    ZERO_THRESHOLD under a penalty singular at zero) are newly frozen instead;
    frozen entries carry an infinite sentinel and must be dropped from the
    design. MIXGL1 freezes a whole covariate group when its inner weighted sum
    vanishes; MIXGL2 freezes by group norm.
    """
    beta = np.atleast_2d(np.asarray(beta_current, dtype=float))
    K, p = beta.shape
    frozen = (np.zeros((K, p), dtype=bool) if zero_mask is None
              else np.asarray(zero_mask, dtype=bool).copy())
    d = np.zeros((K, p))
    if spec.family == "NONE" or (spec.lam == 0.0 and spec.ridge_lambda == 0.0):
        d[frozen] = np.inf
        return d, frozen
    w = _check_weights(spec, beta)
    absb = np.where(frozen, 0.0, np.abs(beta))
    nlam = n * spec.lam

    if spec.family == "MIXGL2":
        if nlam > 0:
            norms = np.sqrt((absb ** 2).sum(axis=0))
            dead = norms < ZERO_THRESHOLD
            frozen[:, dead] = True
            live = ~dead
            d[:, live] = nlam * w[live][None, :] / norms[live][None, :]
    elif spec.family in ("MIXGL1", "ADL"):
        if nlam > 0:
            frozen |= (absb < ZERO_THRESHOLD) & (w > 0)
            absb = np.where(frozen, 0.0, absb)
            if spec.family == "ADL":
                active = ~frozen & (w > 0)
                d[active] = nlam * w[active] / absb[active]
            else:
                inner = (w * absb).sum(axis=0)
                dead = inner <= 0.0
                frozen[:, dead] = True
                for l in np.nonzero(~dead)[0]:
                    act = ~frozen[:, l] & (w[:, l] > 0)
                    d[act, l] = nlam * w[act, l] / (
                        2.0 * np.sqrt(inner[l]) * absb[act, l]
                    )
    else:
        if mixing is None:
            raise ValueError(f"{spec.family} requires mixing proportions")
        mixing = np.asarray(mixing, dtype=float)
        npi = n * mixing[:, None]
        if spec.lam > 0:
            frozen |= absb < ZERO_THRESHOLD
            absb = np.where(frozen, 0.0, absb)
            if spec.family == "MIXLASSO_L2":
                slope = np.full_like(beta, spec.lam)
            else:
                slope = scad_derivative(absb, spec.lam, spec.scad_a)
            act = ~frozen
            d[act] = (npi * np.ones((K, p)))[act] * slope[act] / absb[act]
        d[~frozen] += 2.0 * spec.ridge_lambda * (npi * np.ones((K, p)))[~frozen]

    d[frozen] = np.inf
    return d, frozen
