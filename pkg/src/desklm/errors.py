"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration file or value violates its contract."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or from an unknown format version."""


class UnrecoverableDivergence(RuntimeError):
    """Training diverged and no checkpoint satisfies the restart health rule."""


class DependencyError(RuntimeError):
    """A required external dependency (e.g. a toxicity classifier) is unavailable."""


class TreeError(ValueError):
    """A comment thread's parent links do not form a tree."""
