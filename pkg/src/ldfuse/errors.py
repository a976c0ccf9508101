"""Exception types shared across the package."""


class LdfuseError(Exception):
    """Base class for all package-specific errors."""


class FormatError(LdfuseError):
    """Malformed or unsupported file contents."""


class ShapeError(LdfuseError, ValueError):
    """Array shape or channel-count mismatch."""


class ParameterError(LdfuseError, ValueError):
    """Invalid argument value."""


class SizeError(LdfuseError, ValueError):
    """Image or array too small for the operation."""


class DomainError(LdfuseError, ValueError):
    """Input outside the mathematical domain of the operation."""


class StateError(LdfuseError, RuntimeError):
    """Operation invoked on a stack missing required trained components."""


class ConfigError(LdfuseError):
    """Unusable run configuration."""
