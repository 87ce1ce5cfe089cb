"""Exception types shared across the package.

The CLI maps each class to an error category and exit code, so library code
should raise these instead of bare ValueError where the failure is
user-visible.
"""


class EvHybridError(Exception):
    """Base class for all package errors."""

    category = "internal"


class ShapeError(EvHybridError):
    """Tensor shapes are inconsistent; message names the offending axis."""

    category = "shape"


class NumericError(EvHybridError):
    """Non-finite or otherwise invalid numeric state."""

    category = "numeric"


class DataFormatError(EvHybridError):
    """Malformed event file or other on-disk artifact."""

    category = "data"


class ConfigError(EvHybridError):
    """Invalid run configuration."""

    category = "config"
