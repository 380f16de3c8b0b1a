"""Exception hierarchy.

Every error raised on purpose by this package derives from ``FuseAteError`` so
callers (the experiment harness in particular) can tell a degenerate
replication apart from a programming bug.
"""


class FuseAteError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FuseAteError, ValueError):
    """Invalid generative or experiment configuration."""


class PrecisionError(FuseAteError, ValueError):
    """Requested Monte Carlo budget is too small for the stated precision."""


class InputError(FuseAteError, ValueError):
    """Malformed arguments or data."""


class NumericalError(FuseAteError, ArithmeticError):
    """A linear system could not be solved reliably."""


class StratificationError(InputError):
    """A fold x study x arm cell needed for fitting is empty."""


class EstimationError(FuseAteError, ArithmeticError):
    """Estimator denominator is degenerate."""


class LinkDegeneracyError(EstimationError):
    """The outcome-link slope is too close to zero."""


class IdentificationError(EstimationError):
    """Second-stage link regression design is collinear."""


class IngestionError(InputError):
    """A CSV file could not be turned into a valid sample."""
