"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ToolkitError):
    """Invalid pipeline configuration; message is path-qualified."""


class NumericError(ToolkitError):
    """A numeric computation failed (rank deficiency, non-finite state, ...)."""


class PhotonStarvationError(NumericError):
    """Zero measured counts where a positive expectation is required."""


class ArrayFormatError(ToolkitError):
    """A portable array container failed validation."""
