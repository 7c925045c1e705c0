"""Exception types shared across the package."""


class CaterpillarError(Exception):
    """Base class for all package errors."""


class ShapeError(CaterpillarError, ValueError):
    """Tensor or weight dimensions do not match; message names the offending axes."""


class ShiftRangeError(CaterpillarError, ValueError):
    """Shift steps meet or exceed the spatial extent along the moved axis."""


class ReflectRangeError(CaterpillarError, ValueError):
    """Reflect padding asked to mirror past the remaining extent."""


class ConfigError(CaterpillarError, ValueError):
    """Invalid or inconsistent configuration value."""


class BuildError(CaterpillarError, ValueError):
    """Model construction failed; message names the stage or layer."""


class FormatError(CaterpillarError, ValueError):
    """Malformed binary file; message carries the offending field or byte offset."""


class NumericError(CaterpillarError, ArithmeticError):
    """Non-finite value encountered where finiteness is required."""


class InsufficientBatchError(CaterpillarError, ValueError):
    """Batch statistics requested over fewer than two elements."""
