"""Exception hierarchy; the CLI maps these onto exit codes."""


class HeartLangError(Exception):
    exit_code = 1


class ConfigError(HeartLangError, ValueError):
    exit_code = 2


class DataError(HeartLangError, ValueError):
    exit_code = 3


class UnrecoverableRecordError(DataError):
    pass


class DegenerateScaleError(DataError):
    pass


class GenerationError(DataError):
    pass


class EmptyTokenizationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class MetricUndefinedError(DataError):
    pass


class NumericDivergenceError(HeartLangError, FloatingPointError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block
