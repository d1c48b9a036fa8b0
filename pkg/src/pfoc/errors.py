"""Exception hierarchy used across the package."""


class PfocError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(PfocError):
    """Incompatible grids, hierarchies or field shapes."""


class NumericalError(PfocError):
    """Non-finite values encountered during a computation."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} at cell {location}")
        self.location = location


class ConfigurationError(PfocError):
    """Invalid user-supplied parameters."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ConvergenceError(PfocError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class ConstraintError(PfocError):
    """The volume-constraint iteration failed to converge."""


class DegenerateSecantError(PfocError):
    """Secant update with a vanishing mass denominator."""


class StoreIntegrityError(PfocError):
    """A space-time store is missing data for a required step."""


class StateError(PfocError):
    """An operation was requested in an invalid optimizer state."""
