"""Exception types shared across the package."""


class RKHSIDError(Exception):
    """Base class for package-specific errors."""


class UnsupportedOrderError(RKHSIDError):
    """A derivative order beyond the kernel's smoothness was requested."""


class IllConditionedGramError(RKHSIDError):
    """Cholesky factorization failed even at the jitter cap."""

    def __init__(self, message, jitter):
        super().__init__(message)
        self.jitter = jitter


class ConfigError(RKHSIDError):
    """Invalid experiment configuration."""


class NumericInputError(RKHSIDError):
    """Non-finite values encountered where finite ones are required."""


class DampingOverflowError(RKHSIDError):
    """Levenberg-Marquardt damping grew past its retry budget."""


class SolverStalledError(RKHSIDError):
    """The active-set solve could not make progress; carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class FitDegenerateError(RKHSIDError):
    """The sparsifier evicted every feature in every dimension."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IntegrationError(RKHSIDError):
    """ODE integration failed; carries the partial trajectory."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
