"""Exception hierarchy shared by every stage of the pipeline.

Each family carries the process exit code the CLI reports for it.
"""


class CompinvError(Exception):
    exit_code = 1


class ConfigError(CompinvError):
    exit_code = 2


class DataError(CompinvError):
    exit_code = 3


class VocabularyError(DataError):
    pass


class RegistryError(DataError):
    pass


class NumericError(CompinvError):
    exit_code = 4


class ContractError(CompinvError, ValueError):
    """Caller broke a documented precondition (shape, arity, range)."""

    exit_code = 5


class GateError(CompinvError):
    exit_code = 6
