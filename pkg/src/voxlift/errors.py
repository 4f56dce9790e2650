"""Exception types shared across the package."""


class VoxliftError(Exception):
    """Base class for all package errors."""


class InvalidArgument(VoxliftError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(VoxliftError, ValueError):
    """An on-disk file is malformed or inconsistent with its metadata."""


class CapacityError(VoxliftError, RuntimeError):
    """A bounded search (e.g. rejection sampling) ran out of attempts."""


class DivergenceError(VoxliftError, FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step
