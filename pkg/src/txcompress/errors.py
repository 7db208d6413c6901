"""Exception hierarchy shared by the pipeline stages.

The CLI maps each class onto a distinct exit code.
"""


class TxCompressError(Exception):
    exit_code = 1


class ConfigError(TxCompressError):
    """Invalid configuration or arguments."""

    exit_code = 2


class DataError(TxCompressError):
    """Input data cannot be read or is inconsistent."""

    exit_code = 3


class InvariantError(TxCompressError):
    """An internal consistency check failed."""

    exit_code = 4
