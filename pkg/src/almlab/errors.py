"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AlmError(Exception):
    exit_code = 1


class ConfigError(AlmError, ValueError):
    """Bad configuration, unknown keys, or invalid CLI usage."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor or parameter shapes do not match the configuration."""


class DataError(AlmError, ValueError):
    """Malformed manifests, audio files or samples."""

    exit_code = 3


class CheckpointError(DataError):
    pass


class NumericError(AlmError, ArithmeticError):
    """A NaN/Inf was produced where a finite value is required."""

    exit_code = 4


class ExternalServiceError(AlmError, RuntimeError):
    """The judge endpoint failed or returned something unusable."""

    exit_code = 5


class JudgeParseError(ExternalServiceError):
    pass
