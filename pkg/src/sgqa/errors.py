"""Exception hierarchy shared across the package."""


class SgqaError(Exception):
    """Base class for all package errors."""


class DimensionError(SgqaError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SgqaError, ValueError):
    """A precondition of an operation was violated."""


class DomainError(SgqaError, ValueError):
    """An operation was applied outside of its mathematical domain."""


class ParameterError(SgqaError, ValueError):
    """A hyperparameter or generator setting is out of range."""


class ConfigurationError(SgqaError, ValueError):
    """A model or run configuration is inconsistent or incomplete."""


class ParseError(SgqaError, ValueError):
    """An input file could not be parsed."""

    def __init__(self, message, *, path=None, line=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        prefix = ":".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line


class SchemaError(SgqaError, ValueError):
    """An input file parsed but is missing required fields."""


class NumericError(SgqaError, ArithmeticError):
    """A non-finite value appeared in a loss or gradient."""


class CheckpointError(SgqaError):
    """Base class for checkpoint loading failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
