"""Exception types shared across the package."""


class DOTError(Exception):
    """Base class for all package errors."""


class InvalidArgument(DOTError, ValueError):
    pass


class GenerationFailure(DOTError, RuntimeError):
    pass


class DegenerateInput(DOTError, ValueError):
    pass


class SolverFailure(DOTError, RuntimeError):
    """Linear solve did not reach the requested tolerance.

    The achieved relative residual is kept on ``residual``.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class DivergenceError(DOTError, RuntimeError):
    pass


class ContractViolation(DOTError, RuntimeError):
    pass


class DatasetError(DOTError, IOError):
    """Corrupt, truncated or incompatible dataset container."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (sample {index})")
        self.index = index
