"""Exception hierarchy shared by every ibkd module."""


class IBKDError(Exception):
    """Base class for all errors raised by ibkd."""


class ShapeError(IBKDError, ValueError):
    """Operand shapes are incompatible."""


class InputError(IBKDError, ValueError):
    """Input values are unusable (non-finite entries, empty sets)."""


class PairingError(ShapeError):
    """Paired sample sets disagree on their row count."""


class DegenerateSampleError(InputError):
    """Too few samples for the estimator to be defined."""


class ConfigError(IBKDError, ValueError):
    """A configuration value is invalid."""


class FormatError(IBKDError, ValueError):
    """A file does not follow its declared format."""


class DataError(IBKDError, ValueError):
    """Evaluation data is inconsistent or missing entries."""


class StateError(IBKDError, RuntimeError):
    """An object is used in a state that does not permit the call."""


class EvaluationError(IBKDError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class TrainingError(IBKDError, RuntimeError):
    """Training was aborted.

    ``epoch`` and ``batch_index`` locate the offending batch and ``history``
    holds the records of the epochs that completed before the failure.
    """

    def __init__(self, message, epoch=None, batch_index=None, history=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.history = history


class ConfigRangeWarning(UserWarning):
    """A hyperparameter lies outside the range the method was tuned over."""
