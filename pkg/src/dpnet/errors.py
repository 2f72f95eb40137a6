"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ConfigError(ValueError):
    """A layer/model/run configuration is internally inconsistent."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class CheckpointError(IOError):
    """A checkpoint file is unreadable, truncated, or version-incompatible."""
