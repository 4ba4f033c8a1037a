"""Exception hierarchy shared across the package."""


class ConfTrError(Exception):
    """Base class for all package errors."""


class ContractError(ConfTrError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""


class DomainError(ContractError):
    """An input lies outside the mathematical domain of an operation."""


class FormatError(ConfTrError, ValueError):
    """A file does not follow the expected on-disk format."""


class NumericalError(ConfTrError, ArithmeticError):
    """Training produced a non-finite value."""


class StepError(ContractError):
    """A training step could not be computed (e.g. degenerate calibration)."""
