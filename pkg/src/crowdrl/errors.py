"""Exception types shared across the package."""


class CrowdRLError(Exception):
    """Base class for all package errors."""


class InputError(CrowdRLError, ValueError):
    """An argument value is outside its documented domain."""


class ShapeError(CrowdRLError, ValueError):
    """Matrix dimensions are incompatible with the requested operation."""


class StateError(CrowdRLError, RuntimeError):
    """An operation was invoked while the object is in the wrong state."""


class ConfigError(CrowdRLError, ValueError):
    """A configuration value violates its constraints."""


class NumericalError(CrowdRLError, FloatingPointError):
    """A computation produced a non-finite value."""


class CapacityError(CrowdRLError, ValueError):
    """A fixed-size container would overflow; raise the capacity and retry."""


class DataIntegrityError(CrowdRLError, ValueError):
    """An event stream or ground-truth record contradicts the world state."""
