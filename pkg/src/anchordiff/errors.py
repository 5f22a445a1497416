"""Exception types shared across the package."""


class AnchorDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(AnchorDiffError):
    """Invalid configuration value (bad range, unknown option, ...)."""


class DimensionError(AnchorDiffError):
    """Array shape incompatible with the operation."""


class ShapeError(AnchorDiffError):
    """Stored artifact shape incompatible with the requested run."""


class DataError(AnchorDiffError):
    """Dataset empty, malformed, or statistically unusable."""


class FormatError(AnchorDiffError):
    """Binary or text artifact file corrupt / wrong version."""


class NumericError(AnchorDiffError):
    """Non-finite values encountered where finite values are required."""


class TapeError(AnchorDiffError):
    """Backward called with a tape that does not match the forward pass."""


class ContractError(AnchorDiffError):
    """Caller violated an operation precondition."""
