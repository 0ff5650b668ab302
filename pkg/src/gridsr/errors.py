"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericsError -> 2,
FormatError -> 3.
"""


class GridSRError(Exception):
    """Base class for all package errors."""


class ShapeError(GridSRError):
    """Operands have incompatible shapes; message names both shapes."""


class NumericsError(GridSRError):
    """Non-finite values or a failed numerical check."""


class FormatError(GridSRError):
    """Malformed on-disk artifact (bad magic, version, truncation, ...)."""


class ConfigError(GridSRError):
    """Invalid configuration or command usage."""
