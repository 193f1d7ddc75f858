"""Exception types shared across the package."""


class MCAMError(Exception):
    """Base class for all package errors."""


class DimensionError(MCAMError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MCAMError, ValueError):
    """A configuration value is invalid (bad group count, band above Nyquist, ...)."""


class ContractError(MCAMError, RuntimeError):
    """A caller broke an operation's precondition (non-scalar loss, stochastic forward, ...)."""


class ValidationError(MCAMError, ValueError):
    """An input value is out of its documented range."""


class DegenerateDataError(MCAMError, ValueError):
    """Data cannot be normalised (e.g. an all-zero baseline channel)."""


class ClassCoverageError(MCAMError, ValueError):
    """A region set does not contain every class."""


class SelectionError(MCAMError, ValueError):
    """No window satisfies an anchor-selection requirement."""


class DegenerateSampleError(MCAMError, ValueError):
    """Paired differences have zero spread, so the t statistic is undefined."""


class DegenerateFilterError(MCAMError, ValueError):
    """A spatial filter is identically zero and cannot be normalised."""
