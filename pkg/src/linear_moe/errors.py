"""Exception types shared across the package."""


class LinearMoeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LinearMoeError, ValueError):
    """Operand shapes do not conform for an operation."""


class NonFiniteError(LinearMoeError, FloatingPointError):
    """An operation produced NaN or infinite values."""

    def __init__(self, message: str, op: str | None = None, layer: int | None = None,
                 instance: str | None = None):
        super().__init__(message)
        self.op = op
        self.layer = layer
        self.instance = instance


class TapeError(LinearMoeError, RuntimeError):
    """Misuse of the autodiff tape (double backward, detached tensors, ...)."""


class DegenerateNormalizerError(LinearMoeError, FloatingPointError):
    """The linear-attention normalizer fell below the allowed floor."""


class CollectiveError(LinearMoeError, RuntimeError):
    """A simulated collective was entered inconsistently or deadlocked."""


class ConfigError(LinearMoeError, ValueError):
    """Invalid model or run configuration."""
