"""Exception types shared across the package."""


class PseudolabError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PseudolabError, ValueError):
    """Operands have incompatible or malformed shapes."""


class ConfigError(PseudolabError, ValueError):
    """A configuration value violates its contract."""


class ValidationError(PseudolabError, ValueError):
    """Input data violates a precondition."""


class NumericsError(PseudolabError, FloatingPointError):
    """A kernel produced or was handed non-finite values."""


class CheckpointError(PseudolabError, ValueError):
    """A checkpoint file failed header or payload validation."""
