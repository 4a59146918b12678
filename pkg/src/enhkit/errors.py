"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericalError -> 2,
I/O problems (OSError) -> 3.
"""


class EnhkitError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(EnhkitError):
    """Invalid configuration, arguments, or input data contents."""


class NumericalError(EnhkitError):
    """A solver failed to converge or a linear system was unusable."""
