"""Exception types shared across the package."""


class FilterShareError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FilterShareError, ValueError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(FilterShareError, ValueError):
    """A configuration value is out of range or unsupported."""


class ContractError(FilterShareError, ValueError):
    """A caller violated an operation's precondition."""


class FormatError(FilterShareError, ValueError):
    """An external file does not match its documented format."""


class DataCorruptionError(FormatError):
    """An external file parses structurally but carries impossible values."""


class NumericError(FilterShareError, ArithmeticError):
    """A numeric procedure failed to converge or produced non-finite values."""


class DegenerateSeedError(NumericError):
    """A seed filter collapsed to (near-)zero norm under unit-norm projection."""


class TrainingAbort(FilterShareError, RuntimeError):
    """Training stopped due to non-finite losses or gradients."""
