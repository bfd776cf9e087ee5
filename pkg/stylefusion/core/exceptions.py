from typing import List, Sequence, Tuple


class StyleFusionException(Exception):
    """Base exception for the fusion engine."""
    pass


class InvalidInputError(StyleFusionException):
    """Raised when a numeric input violates its domain (NaN, negative std, ...)."""
    pass


class ShapeError(StyleFusionException):
    """Raised when matrix dimensions do not line up."""
    pass


class DegenerateTimeError(StyleFusionException):
    """Raised when the bridge velocity denominator collapses."""
    pass


class UsageError(StyleFusionException):
    """Raised on a malformed command-line invocation."""
    pass


class ConfigValidationError(StyleFusionException):
    """Raised when an experiment config fails schema validation."""

    def __init__(self, diagnostics: Sequence[Tuple[str, str]]):
        self.diagnostics: List[Tuple[str, str]] = list(diagnostics)
        super().__init__("; ".join(f"{pointer}: {message}" for pointer, message in self.diagnostics))


def raise_shape_error(what: str, expected, actual):
    """Raise a shape error with a uniform message."""
    raise ShapeError(f"{what}: expected {expected}, got {actual}")


def raise_invalid_input_error(what: str, detail: str):
    """Raise an invalid-input error with a uniform message."""
    raise InvalidInputError(f"Invalid {what}: {detail}")
