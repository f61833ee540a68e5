"""Exception types shared across the package."""


class KacflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(KacflowError):
    """A descriptor, config file, or argument combination is invalid."""


class ValidationError(KacflowError):
    """A sampled-point invariant check failed; the message names the point."""


class NumericsError(KacflowError):
    """A quadrature or optimizer did not reach its requested tolerance."""


class BoundViolationError(KacflowError):
    """A rate exceeded its declared uniform bound during thinning."""
