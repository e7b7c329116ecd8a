"""Exception hierarchy. Each class carries the exit code the CLI maps it to."""


class SampletagError(Exception):
    exit_code = 1


class ConfigError(SampletagError):
    """Invalid configuration or usage."""


class DimensionError(ConfigError):
    """Shape mismatch between tensors or parameters."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class StateError(SampletagError):
    """Operation called in the wrong state (consumed tape, single-element batchnorm)."""


class DataError(SampletagError):
    exit_code = 2


class ManifestError(DataError):
    pass


class AudioFormatError(DataError):
    pass


class CorruptCheckpointError(DataError):
    pass


class NumericError(SampletagError):
    exit_code = 3


class OracleError(NumericError):
    """Finite-difference oracle produced a non-finite loss."""


class UndefinedMetricError(SampletagError):
    """AUC requested for a tag with only one class present."""
