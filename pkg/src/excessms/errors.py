"""Exception hierarchy shared by the library and the command line tool.

Each class carries the process exit code the CLI uses when it escapes.
"""


class ExcessMSError(Exception):
    exit_code = 1


class ConfigError(ExcessMSError, ValueError):
    """Bad or incomplete run configuration."""

    exit_code = 2


class SchemaError(ExcessMSError, ValueError):
    """Input data does not match the expected layout."""

    exit_code = 3


class ConvergenceError(ExcessMSError, RuntimeError):
    """An optimiser or root finder failed to converge."""

    exit_code = 4
