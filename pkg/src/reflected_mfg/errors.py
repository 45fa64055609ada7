"""Exception hierarchy shared by the solvers and the CLI."""


class ReflectedMfgError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class ConfigError(ReflectedMfgError, ValueError):
    exit_code = 1


class InvalidArgumentError(ReflectedMfgError, ValueError):
    exit_code = 1


class InvariantViolation(ReflectedMfgError):
    exit_code = 4


class NumericalError(ReflectedMfgError, RuntimeError):
    exit_code = 2


class NonConvergenceError(NumericalError):
    """A fixed-point iteration hit its iteration cap.

    ``last_gap`` carries the final increment so callers can tell a slowly
    converging run from a diverging one.
    """

    def __init__(self, message: str, last_gap: float, iterations: int):
        super().__init__(f"{message} (last gap {last_gap:.3e} after {iterations} iterations)")
        self.last_gap = last_gap
        self.iterations = iterations


class BudgetError(ReflectedMfgError):
    exit_code = 3
