"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument lies outside the documented domain."""


class ConfigurationError(ValueError):
    """A run configuration is inconsistent, e.g. the grid is too coarse for the tube radius."""


class DegenerateGeometryError(ValueError):
    """A geometric construction is undefined, e.g. the wedge point of parallel lines."""


class PreconditionError(ValueError):
    """The hypothesis of an instance check is not met."""


class UnsupportedError(NotImplementedError):
    """The requested dimension or mode is not implemented."""


class InvariantViolation(RuntimeError):
    """A property that must hold on every valid instance failed."""
