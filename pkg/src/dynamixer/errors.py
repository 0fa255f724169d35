"""Exception hierarchy shared across the package."""


class DynaMixerError(Exception):
    """Base class for all package errors."""


class DimensionError(DynaMixerError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DynaMixerError, ValueError):
    """A model, training or file configuration is invalid.

    ``problems`` holds one message per offending field so callers can
    report every issue at once.
    """

    def __init__(self, message, problems=None):
        self.problems = list(problems or [message])
        super().__init__(message)


class NumericError(DynaMixerError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class ContractError(DynaMixerError, ValueError):
    """A documented precondition of a call was violated."""


class CheckpointError(DynaMixerError):
    """A checkpoint is malformed or does not match the model configuration."""


class DataFormatError(DynaMixerError):
    """A dataset file exists but its contents are not in the expected format."""
