"""Exception types shared across the package."""


class FusionNeckError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FusionNeckError):
    """Operands have incompatible or malformed dimensions."""


class ContractError(FusionNeckError):
    """An input violates a documented precondition."""


class EvaluationError(FusionNeckError):
    """A numeric evaluation produced a non-finite result."""


class ConfigError(FusionNeckError):
    """A configuration value is missing, malformed, or inconsistent."""


class ParamsIOError(FusionNeckError):
    """A parameter stream cannot be decoded (bad version, shape, or payload)."""


class FileFormatError(FusionNeckError):
    """A line-oriented interchange file contains a malformed record."""
