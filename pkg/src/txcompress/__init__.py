"""Compress transaction graphs around labeled accounts and detect malicious ones."""
from .errors import ConfigError, DataError, InvariantError, TxCompressError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "InvariantError", "TxCompressError", "__version__"]
