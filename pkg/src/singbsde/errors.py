"""Exception hierarchy shared by all modules."""


class SingBSDEError(Exception):
    """Base class for library errors."""


class DomainError(SingBSDEError, ValueError):
    """An argument lies outside the domain of the operation."""


class KernelGuardError(SingBSDEError, ArithmeticError):
    """The generator kernel was evaluated outside its guarded region."""


class KernelGuardWarning(UserWarning):
    """Guard exceeded where the kernel formulas stay well defined (q >= 2)."""


class NumericalError(SingBSDEError, ArithmeticError):
    """A solver failed: singular system, Newton stall, NaN, no convergence."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InvariantViolation(SingBSDEError):
    """A structural property that must hold on a finished run failed."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(SingBSDEError, ValueError):
    """The experiment configuration is malformed."""
