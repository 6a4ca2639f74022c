"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A scalar argument or configuration value is outside its valid range."""


class NumericError(ArithmeticError):
    """A computed quantity is NaN or infinite; the message names the term."""


class NonFiniteLossError(NumericError):
    """The optimization loop hit a non-finite loss and aborted.

    Carries the 1-based step index and the term breakdown at the failing step.
    """

    def __init__(self, step, breakdown, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.breakdown = breakdown
