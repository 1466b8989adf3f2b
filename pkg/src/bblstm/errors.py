"""Exception hierarchy shared across the package."""


class BBLSTMError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(BBLSTMError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class ConvergenceError(BBLSTMError, ArithmeticError):
    """An iterative numerical routine hit its iteration cap."""


class NumericError(BBLSTMError, ArithmeticError):
    """A NaN/Inf or an underflow that would poison downstream values."""

    def __init__(self, message: str, **context):
        self.context = context
        if context:
            details = ", ".join(f"{k}={v!r}" for k, v in context.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ShapeError(BBLSTMError, ValueError):
    """Operands of a tensor op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class UsageError(BBLSTMError, ValueError):
    """Caller misuse: bad configuration, wrong arity, invalid label, etc."""


class DataFormatError(BBLSTMError, ValueError):
    """A dataset file is malformed."""


class ArchitectureMismatch(BBLSTMError, ValueError):
    """A checkpoint's parameters do not match the configured architecture."""

    def __init__(self, differences: list[tuple[str, tuple | None, tuple | None]]):
        self.differences = differences
        lines = [f"{name}: expected {want}, found {got}" for name, want, got in differences]
        super().__init__("checkpoint does not match the configured architecture:\n  " + "\n  ".join(lines))
