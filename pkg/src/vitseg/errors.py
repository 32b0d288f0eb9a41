"""Exception hierarchy shared across the package.

ConfigError maps to CLI exit code 2, DataError (and subclasses) to exit
code 3.
"""


class VitsegError(Exception):
    """Base class for all package errors."""


class ConfigError(VitsegError):
    """Invalid strategy, slide, or CLI configuration."""


class DataError(VitsegError):
    """Unreadable, malformed, or degenerate input data."""


class ShapeError(DataError):
    """Tensor shapes incompatible with the requested operation."""


class NumericsError(DataError):
    """A kernel produced or received non-finite values."""


class ContainerError(DataError):
    """Weight/text container failed validation (checksum, missing tensor, ...)."""
