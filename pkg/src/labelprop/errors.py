"""Exception types shared across the package."""


class LabelPropError(Exception):
    """Base class for all package errors."""


class ConfigError(LabelPropError):
    """A configuration value is invalid or inconsistent."""


class InputError(LabelPropError):
    """Caller-supplied data violates a precondition."""


class FormatError(LabelPropError):
    """A file does not match its declared binary or text layout."""


class NumericalError(LabelPropError):
    """A numerical operation produced or received non-finite values."""


class InconsistencyError(LabelPropError):
    """Internal state violates a structural invariant."""
