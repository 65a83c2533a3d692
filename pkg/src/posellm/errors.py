"""Exception types shared across modules."""


class ShapeError(ValueError):
    """An array does not have the shape an operation requires."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""
