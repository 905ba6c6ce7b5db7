"""Exception classes; the CLI maps each family to its own exit code."""


class HmdFaceError(Exception):
    exit_code = 1


class ConfigError(HmdFaceError, ValueError):
    exit_code = 2


class DataError(HmdFaceError, ValueError):
    exit_code = 3


class NumericError(HmdFaceError, ArithmeticError):
    exit_code = 4


class ProjectionError(DataError):
    """A point that must be visible lies behind a camera."""
