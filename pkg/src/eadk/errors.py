"""Exception hierarchy shared across the package."""


class EadkError(Exception):
    """Base class for all package errors."""


class DimensionError(EadkError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(EadkError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(EadkError, ValueError):
    """A documented precondition was violated by the caller."""


class TrainingError(EadkError, RuntimeError):
    """Optimization produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ParseError(EadkError, ValueError):
    """A file could not be parsed or failed schema validation."""
