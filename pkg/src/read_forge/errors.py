"""Exception hierarchy shared by every read_forge module."""


class ReadForgeError(Exception):
    """Base class for all library errors."""


class DimensionError(ReadForgeError, ValueError):
    pass


class ShapeError(ReadForgeError, ValueError):
    pass


class LineageError(ReadForgeError, RuntimeError):
    """Raised when backward is asked for a loss that was not recorded on the tape."""


class ConfigError(ReadForgeError, ValueError):
    pass


class EvaluationError(ReadForgeError, ArithmeticError):
    pass


class InputError(ReadForgeError, ValueError):
    pass


class CacheError(ReadForgeError, ValueError):
    pass


class ModeError(ReadForgeError, ValueError):
    pass


class NumericalRangeError(ReadForgeError, ArithmeticError):
    pass


class SmallNormViolation(ReadForgeError, ArithmeticError):
    """Fixed-point iteration for (P + I)^-1 failed to converge."""


class DomainError(ReadForgeError, ValueError):
    pass


class TrainingError(ReadForgeError, RuntimeError):
    pass


class TraceError(ReadForgeError, ValueError):
    pass


class CheckpointError(ReadForgeError, ValueError):
    pass
