"""Exception types shared across the package.

Each class carries a short ``category`` string that the command line surfaces
in its single-line error message, and a distinct process exit code.
"""


class PointSegError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(PointSegError, ValueError):
    category = "config"
    exit_code = 3


class InputError(PointSegError, ValueError):
    category = "input"
    exit_code = 3


class MissingFileError(PointSegError, FileNotFoundError):
    category = "missing_file"
    exit_code = 4


class StageMismatchError(PointSegError):
    category = "stage_mismatch"
    exit_code = 5


class FormatError(PointSegError, ValueError):
    category = "format"
    exit_code = 6


class NumericError(PointSegError, ArithmeticError):
    category = "numeric"
    exit_code = 7
