"""Exception types shared across the package."""


class SpecificationError(ValueError):
    """An argument violates the documented contract of an operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class FormatError(ValueError):
    """A data file does not match its binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapabilityError(RuntimeError):
    """The object lacks data required by the requested operation."""


class IntegrityError(RuntimeError):
    """A persisted artifact is missing or inconsistent."""
