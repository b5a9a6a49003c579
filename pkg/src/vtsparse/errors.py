"""Exception hierarchy shared by all modules."""


class VTSparseError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(VTSparseError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in self.shapes)})"
        super().__init__(message)


class ConfigError(VTSparseError, ValueError):
    """Invalid configuration field or combination of fields."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class RankError(VTSparseError, ArithmeticError):
    """SVD-based rank estimation failed to converge."""


class EmbeddingFormatError(VTSparseError, ValueError):
    """Malformed SPVT embedding file."""


class WorkloadMismatchError(VTSparseError, ValueError):
    """Two reports were produced from different workloads."""


class PoolTooSmall(VTSparseError):
    """Recycling pool has fewer than two rows; density is undefined."""


class UnknownStage(VTSparseError, KeyError):
    """Stage id not known to the cost model."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown stage"
