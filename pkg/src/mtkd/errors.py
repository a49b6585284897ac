"""Exception hierarchy shared across the package.

Each family carries an ``exit_code`` used by the command-line entry point.
"""


class MTKDError(Exception):
    exit_code = 1


class ContractError(MTKDError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class ShapeError(ContractError):
    # in practice a mismatch between a checkpoint, a config and a data file
    exit_code = 3


class ParameterError(ContractError):
    pass


class LabelError(ContractError):
    """Labels required by a loss are missing from the batch."""


class ConfigError(MTKDError):
    exit_code = 2


class DataError(MTKDError):
    exit_code = 3
    code = 30


class HeaderError(DataError):
    code = 31


class TruncatedError(DataError):
    code = 32


class VersionError(DataError):
    code = 33


class NumericError(MTKDError, ArithmeticError):
    exit_code = 4
