from typing import Optional


class NumericalError(RuntimeError):
    """Base class for failures of the numerical pipeline."""


class SingularSystemError(NumericalError):
    def __init__(self, message: str, step: Optional[int] = None) -> None:
        if step is not None:
            message = f"{message} (time step {step})"
        super().__init__(message)
        self.step = step


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float) -> None:
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual
