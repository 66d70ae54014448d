"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class VilacoError(Exception):
    pass


class ConfigError(VilacoError):
    """Invalid configuration value or incompatible option combination."""


class InputError(VilacoError):
    """Malformed runtime input (bad label string, shape mismatch, ...)."""


class DataError(VilacoError):
    """Dataset or filesystem problem (missing mask, unwritable dir, ...)."""


class CheckpointError(VilacoError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


class NumericalError(VilacoError):
    """Non-finite values encountered during training or inference."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
