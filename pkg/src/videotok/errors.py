class ValidationError(ValueError):
    """Bad input: shapes, vocabulary, configuration. CLI exit code 1."""


class ContainerError(ValidationError):
    """Malformed or truncated LPQ1 container."""


class DegenerateDataError(ValidationError):
    """Corpus has no two clips that differ."""


class NumericalError(ArithmeticError):
    """NaN/Inf encountered. CLI exit code 2."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
