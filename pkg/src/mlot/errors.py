"""Exception types shared across the package."""


class MlotError(Exception):
    """Base class for all package errors."""


class DimensionError(MlotError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(MlotError, ValueError):
    """An input is degenerate for the requested operation (e.g. zero norm)."""


class ContractError(MlotError, ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(MlotError, FloatingPointError):
    """A forward computation produced NaN or Inf from finite inputs."""


class OracleInputError(MlotError, ValueError):
    """Invalid measure, weights, or cost passed to an OT oracle."""


class ConvergenceError(MlotError, RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, message: str, iterations: int = -1, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NumericalAbort(MlotError, RuntimeError):
    """Training aborted because a loss became NaN or diverged."""


class CheckpointError(MlotError, ValueError):
    """A checkpoint or dataset file failed validation."""
