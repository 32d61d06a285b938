"""Penalized finite mixture-of-regressions and species archetype models."""

__version__ = "0.1.0"

from .errors import (
    AllStartsFailedError,
    ConstantColumnError,
    DataError,
    DimensionMismatchError,
    EmptySetError,
    InvalidResponseError,
    IsolatedSpeciesWarning,
    NumericalError,
    PenfmrError,
    SingularSystemError,
)
from .model import (
    Dataset,
    FmrParams,
    ResponseFamily,
    apply_standardization,
    component_log_density,
    log_likelihood,
    standardize,
)
from .penalties import PenaltySpec, adaptive_weights, lqa_coefficients, penalty_value
from .sam import (
    SamDataset,
    SamParams,
    archetype_linear_predictor,
    sam_fit,
    sam_log_likelihood,
)
from .selection import TuningGrid, bic_tuning, select_num_components, select_tuning
from .solver import FitControl, FitResult, e_step, fit, m_step, random_initialization
