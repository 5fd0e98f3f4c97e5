"""Exception taxonomy shared across the package."""


class MergeclError(Exception):
    """Base class for all mergecl errors."""


class AlignmentError(MergeclError):
    """Two parameter collections do not share the required name/shape layout."""


class InputError(MergeclError, ValueError):
    """An argument value is outside the operation's domain."""


class UsageError(MergeclError, RuntimeError):
    """An API was called in an unsupported order or state."""


class CsvParseError(MergeclError, ValueError):
    """A dataset CSV row could not be parsed; message names the line."""


class CheckpointFormatError(MergeclError, ValueError):
    """Checkpoint file has a bad magic number or unsupported version."""


class CheckpointCorruptionError(MergeclError, ValueError):
    """Checkpoint file is truncated or internally inconsistent."""


class ConfigError(MergeclError, ValueError):
    """Experiment config document failed schema validation."""


class NumericalError(MergeclError, ArithmeticError):
    """A numerical routine left its supported regime (e.g. non-PSD covariance)."""
