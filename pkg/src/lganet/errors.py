"""Exception types shared across the library."""


class LganetError(Exception):
    """Base class for all library errors."""


class ShapeError(LganetError):
    """Operands have incompatible or invalid shapes."""


class NumericsError(LganetError):
    """An operation produced NaN or Inf."""


class GraphError(LganetError):
    """Autograd misuse, e.g. backward on a detached tensor."""


class ConfigError(LganetError):
    """Invalid configuration value or combination."""


class FormatError(LganetError):
    """Malformed binary file (bad magic, version, or truncation)."""
