"""Joint state estimation and sparse ODE identification by kernel collocation."""

__version__ = "0.1.0"

from .kernel import KernelSpec, build_deriv_table, eval_kernel, gram
from .library import Feature, LibrarySpec, SparseCoeffs, generate
from .errors import (
    ConfigError,
    DampingOverflowError,
    FitDegenerateError,
    IllConditionedGramError,
    IntegrationError,
    NumericInputError,
    RKHSIDError,
    SolverStalledError,
    UnsupportedOrderError,
)

__all__ = [
    "KernelSpec",
    "build_deriv_table",
    "eval_kernel",
    "gram",
    "Feature",
    "LibrarySpec",
    "SparseCoeffs",
    "generate",
    "RKHSIDError",
    "ConfigError",
    "DampingOverflowError",
    "FitDegenerateError",
    "IllConditionedGramError",
    "IntegrationError",
    "NumericInputError",
    "SolverStalledError",
    "UnsupportedOrderError",
]
