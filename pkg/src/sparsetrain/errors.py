"""Exception types raised by the sparsetrain library.

Everything user-facing derives from SparseTrainError so the CLI can catch a
single base class and report the origin without swallowing programming bugs
(plain ValueError/TypeError stay fatal).
"""


class SparseTrainError(Exception):
    """Base class for all anticipated failures."""


class ShapeError(SparseTrainError):
    """Tensor or graph shapes are inconsistent."""


class GraphError(SparseTrainError):
    """Model graph is malformed (bad edges, unsupported topology)."""


class BudgetError(SparseTrainError):
    """A memory budget cannot be satisfied."""


class ScheduleError(SparseTrainError):
    """Update-schedule state was driven outside its valid range."""


class PruningError(SparseTrainError):
    """A pruning request is infeasible for the given model."""


class CheckpointError(SparseTrainError):
    """Checkpoint bytes do not parse or fail validation."""


class DatasetError(SparseTrainError):
    """Dataset files are malformed or inconsistent with their spec."""


class ConfigError(SparseTrainError):
    """A run configuration value is missing, malformed, or contradictory."""
