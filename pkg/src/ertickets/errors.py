"""Exception hierarchy shared by all modules."""


class ErTicketsError(Exception):
    """Base class for all library errors."""


class StructuralError(ErTicketsError, ValueError):
    """Shapes, layer counts or file layouts do not line up."""


class DomainError(ErTicketsError, ValueError):
    """A scalar argument is outside its admissible range."""


class NumericError(ErTicketsError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class InfeasibleError(ErTicketsError, RuntimeError):
    """No solution exists for the requested density or constraint."""


class RepairInfeasibleError(InfeasibleError):
    """Flow repair could not produce a flow-preserving mask."""


class BudgetError(ErTicketsError, RuntimeError):
    """A computation exceeds the configured enumeration budget."""
