"""Exception hierarchy shared by every opreg module."""


class OpregError(Exception):
    """Base class for all errors raised by opreg."""


class ShapeError(OpregError, ValueError):
    """Operand or layer shapes do not chain."""


class LayoutError(OpregError, ValueError):
    """Dataset layout is incompatible with the model's merge strategy."""


class GraphError(OpregError, RuntimeError):
    """Misuse of the differentiation graph (non-scalar seed, double backward)."""


class NumericalError(OpregError, ArithmeticError):
    """Non-finite values, divergence, or solver non-convergence."""


class ConfigError(OpregError, ValueError):
    """Malformed configuration file or command-line value."""


class DataFormatError(OpregError, ValueError):
    """Binary container could not be decoded."""


class BadMagicError(DataFormatError):
    pass


class VersionError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class CheckpointError(DataFormatError):
    """Checkpoint contents disagree with the model configuration they carry."""
