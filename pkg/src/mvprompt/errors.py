"""Exception types shared across the package."""


class ParseError(ValueError):
    """A controller-config string or run-config file does not match the grammar."""


class ConfigError(ValueError):
    """A structurally valid input violates a configuration contract."""


class ShapeError(ValueError):
    """A tensor or image has the wrong dimensions for the requested operation."""


class NumericsError(ArithmeticError):
    """Non-finite or degenerate values where finite ones are required."""


class DivergenceError(RuntimeError):
    """Optimization produced non-finite parameters.

    Carries the iteration index at which divergence was detected.
    """

    def __init__(self, iteration: int, message: str | None = None):
        self.iteration = iteration
        super().__init__(message or f"optimization diverged at iteration {iteration}")
