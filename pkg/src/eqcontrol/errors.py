"""Exception hierarchy shared by all modules."""


class EqControlError(Exception):
    """Base class for library errors."""


class DomainError(EqControlError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(EqControlError, ValueError):
    """Invalid configuration (bad keys, violated stability bound, ...)."""


class UnsupportedKernelError(EqControlError):
    """The requested kernel has no factorization available."""


class EvaluationError(EqControlError, ArithmeticError):
    """A coefficient evaluation returned a non-finite value."""


class MinimizationError(EqControlError, ArithmeticError):
    """Every candidate control produced a non-finite Hamiltonian."""


class DivergenceError(EqControlError, ArithmeticError):
    """A marching solver produced a non-finite update."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class BlowUpError(EqControlError, ArithmeticError):
    """A simulated path left the finite range."""

    def __init__(self, message, path=None, time_index=None):
        super().__init__(message)
        self.path = path
        self.time_index = time_index


class NonConvergenceError(EqControlError, ArithmeticError):
    """A fixed-point iteration hit its sweep limit."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


NUMERIC_ERRORS = (EvaluationError, MinimizationError, DivergenceError,
                  BlowUpError, NonConvergenceError)
