"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericError -> 3, DataFormatError and OSError -> 4.
"""


class PcflowError(Exception):
    """Base class for toolkit errors."""


class ConfigError(PcflowError, ValueError):
    """Invalid configuration value, unknown identifier, or violated guard."""


class NumericError(PcflowError, RuntimeError):
    """Numerical failure: NaN state, diverging optimization, etc."""


class DataFormatError(PcflowError, ValueError):
    """Malformed file content (bad magic, parse failure, truncation)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
