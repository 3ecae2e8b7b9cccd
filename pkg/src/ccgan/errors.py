"""Exception hierarchy shared by every module.

Each class carries the CLI exit status it maps to.
"""


class CCGanError(Exception):
    exit_code = 1


class ConfigError(CCGanError):
    exit_code = 2


class SpecError(ConfigError):
    """Invalid network / task / generator specification."""


class ContractError(CCGanError):
    """An operation was called outside its documented preconditions."""

    exit_code = 2


class DataError(CCGanError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionError(DataError):
    pass


class NumericError(CCGanError):
    exit_code = 4
