"""Exception types shared across the package."""


class GridsightError(Exception):
    """Base class for all library errors."""


class DimensionError(GridsightError):
    """Operand shapes are incompatible."""


class GeometryError(GridsightError):
    """A layer or crop geometry cannot be realized (e.g. empty output map)."""


class NumericError(GridsightError):
    """A non-finite value appeared where only finite values are allowed."""


class LabelError(GridsightError):
    """A class index is outside its label space."""


class StateError(GridsightError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(GridsightError):
    """A binary file failed validation (magic, version, checksum, truncation)."""


class ConfigError(GridsightError):
    """A run configuration is invalid (unknown key, bad value)."""
