"""Conjoint-to-equilibrium simulation engine.

Synthetic preferences, efficient choice designs, simulated responses,
hierarchical Bayes mixed logit estimation and exhaustive Nash best-response
games among symmetric firms.
"""

from .errors import (
    CalibrationError,
    CapacityError,
    ConfigurationError,
    DegenerateDesignError,
    InfeasibleDesignError,
    NeedsLongerChainError,
    NumericalFailureError,
    ResponseTieError,
    UndefinedVarianceError,
)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CalibrationError",
    "CapacityError",
    "ConfigurationError",
    "DegenerateDesignError",
    "InfeasibleDesignError",
    "NeedsLongerChainError",
    "NumericalFailureError",
    "ResponseTieError",
    "UndefinedVarianceError",
]
