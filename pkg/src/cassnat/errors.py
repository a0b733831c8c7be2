"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, numeric failures exit 3.
"""


class CassNatError(Exception):
    exit_code = 1


class UsageError(CassNatError):
    exit_code = 1


class DimensionError(CassNatError, ValueError):
    exit_code = 1


class ParameterError(CassNatError, ValueError):
    exit_code = 1


class ConfigError(CassNatError, ValueError):
    exit_code = 1


class NumericError(CassNatError, FloatingPointError):
    exit_code = 3


class InfeasibleError(CassNatError, ValueError):
    exit_code = 2


class NoTokenError(CassNatError, ValueError):
    exit_code = 2


class MaskError(CassNatError, ValueError):
    exit_code = 2


class DegenerateError(CassNatError, ValueError):
    exit_code = 2


class CheckpointError(CassNatError):
    exit_code = 2


class FormatError(CassNatError):
    exit_code = 2
