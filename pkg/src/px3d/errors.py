"""Exception types shared across the package."""


class Px3dError(Exception):
    """Base class for all package errors."""


class ConfigError(Px3dError, ValueError):
    """Invalid configuration value; message names the offending field."""


class GeometryError(Px3dError, ValueError):
    """Degenerate or unusable geometry (empty/zero-length curve, ...)."""


class ShapeError(Px3dError, ValueError):
    """Array shape mismatch; message lists expected and actual shapes."""


class FormatError(Px3dError, ValueError):
    """Malformed file on disk; message names the bad field."""


class MetricError(Px3dError, ValueError):
    """Metric preconditions violated (size, binarity, ...)."""


class DegenerateBatchError(Px3dError, ValueError):
    """Batch too small for a contrastive denominator."""


class TrainingError(Px3dError, RuntimeError):
    """Training aborted (non-finite loss, bad manifest, ...)."""
