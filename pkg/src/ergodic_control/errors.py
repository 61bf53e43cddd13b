"""Exception hierarchy. The CLI maps ConfigError to exit 1, NumericalError to exit 2."""


class ConfigError(ValueError):
    """Bad configuration or model specification."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class UnsupportedMarginalError(ContractError):
    pass


class NumericalError(RuntimeError):
    """Base class for numerical failures (non-convergence, blow-up, ...)."""


class QuadratureError(NumericalError):
    def __init__(self, message, achieved_error):
        self.achieved_error = achieved_error
        super().__init__(f"{message} (achieved error {achieved_error:.3e})")


class CFLError(NumericalError):
    pass


class NegativeProbabilityError(CFLError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class LinearSolveError(NumericalError):
    def __init__(self, message, condition_estimate=None):
        self.condition_estimate = condition_estimate
        super().__init__(message)


class SimulationError(NumericalError):
    def __init__(self, message, time=None, path_index=None):
        self.time = time
        self.path_index = path_index
        super().__init__(message)
