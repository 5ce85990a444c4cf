"""Error taxonomy. Each class carries the process exit code the CLI maps it to."""


class TailrecError(Exception):
    exit_code = 1


class ConfigError(TailrecError):
    """Invalid configuration value or bad argument to an operation."""

    exit_code = 2


class DataError(TailrecError):
    """Malformed or inconsistent input data (files or in-memory)."""

    exit_code = 3


class DependencyError(TailrecError):
    """A pipeline stage was requested before its upstream artifact exists."""

    exit_code = 4


class OutputError(TailrecError):
    """Filesystem failure writing reports/artifacts, or output dir already in use."""

    exit_code = 5


class ColdUserError(TailrecError):
    """Requested user has no training history to recommend from."""

    exit_code = 6
