"""Exception types raised across the toolkit."""


class AmilError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AmilError, ValueError):
    """Operand extents do not agree."""


class GeometryError(AmilError, ValueError):
    """A spatial extent does not fit the requested window, kernel or patch."""


class ContractError(AmilError, ValueError):
    """A documented precondition was violated."""


class IngestionError(AmilError):
    """A dataset file or row could not be read."""


class TrainingError(AmilError, RuntimeError):
    """Optimization produced a non-finite value."""


class CheckpointError(AmilError):
    """A checkpoint manifest and its payload disagree."""
