"""Exception types shared across the package."""


class DermprobeError(Exception):
    """Base class for all package errors."""


class ParameterError(DermprobeError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(DermprobeError, ValueError):
    """A run configuration is invalid. The message lists every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(DermprobeError, ValueError):
    """A sample or corpus violates a data contract."""


class CorpusValidationError(DataError):
    """Metadata rows failed validation. Carries one message per bad row."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


class MaskDecodeError(DataError):
    """A mask pixel does not match the palette."""


class CapacityError(DataError):
    """A (tone, malignancy) cell is too small to draw the requested plan."""


class ActivationTooSmallError(ParameterError):
    """An activation has fewer than 512 elements and cannot be pooled."""


class UndefinedMetricError(DermprobeError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class CheckpointError(DermprobeError):
    """Base class for backbone/head checkpoint problems."""


class CheckpointMissingError(CheckpointError, FileNotFoundError):
    """The checkpoint file does not exist."""


class CheckpointCorruptError(CheckpointError, ValueError):
    """The checkpoint file exists but cannot be parsed into a model."""


class GeometryMismatchError(CheckpointError, ValueError):
    """A loaded checkpoint's geometry disagrees with the expected descriptor."""


class ImmutabilityError(DermprobeError, RuntimeError):
    """Attempted to mutate a handle that is frozen by contract."""
