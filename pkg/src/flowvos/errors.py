"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InputError(ValueError):
    """An input value violates a precondition (range, finiteness, layout)."""


class UsageError(RuntimeError):
    """The API was called in an unsupported way (wrong order, wrong state)."""


class FormatError(ValueError):
    """A file does not conform to its declared binary/container format."""


class TrainingError(RuntimeError):
    """Optimization diverged or otherwise failed; carries the failing step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
