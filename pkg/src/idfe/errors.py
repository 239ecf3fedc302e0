"""Exception hierarchy shared by every module."""


class IdfeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IdfeError, ValueError):
    pass


class ParameterError(IdfeError, ValueError):
    pass


class ContractError(IdfeError, ValueError):
    pass


class TapeStateError(IdfeError, RuntimeError):
    pass


class ConfigError(IdfeError, ValueError):
    pass


class ValidationError(IdfeError, ValueError):
    pass


class FormatError(IdfeError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyAudioError(IdfeError, ValueError):
    pass


class DegenerateNoiseError(IdfeError, ValueError):
    pass


class AssetError(IdfeError, LookupError):
    pass


class MetricError(IdfeError, ValueError):
    pass


class TrainingDivergedError(IdfeError, FloatingPointError):
    def __init__(self, step, message="loss is not finite"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class EmptyUtteranceError(IdfeError, ValueError):
    pass
