"""Exception hierarchy shared across the package.

CLI exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""


class MscError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MscError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor dimensions violate an operation's contract."""


class DataError(MscError):
    """Malformed or missing input data (files, labels, manifests)."""

    exit_code = 3


class NumericError(MscError):
    """Numerical failure: non-finite values, gradient-check failure, tape misuse."""

    exit_code = 4
