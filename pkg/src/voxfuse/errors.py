"""Exception types shared across the package."""


class VoxfuseError(Exception):
    """Base class for all library errors."""


class ShapeError(VoxfuseError, ValueError):
    """Incompatible tensor or grid dimensions."""


class InvalidValueError(VoxfuseError, ValueError):
    """NaN or otherwise invalid numeric input."""


class ContractError(VoxfuseError, ValueError):
    """An input violates a documented precondition (normalization, ranges, ...)."""


class DegenerateBatchError(VoxfuseError, ValueError):
    """Every entry of a batch was ignored, so a mean is undefined."""


class DegenerateEvaluationError(VoxfuseError, ValueError):
    """No class has a defined IoU."""


class DivergenceError(VoxfuseError, RuntimeError):
    """Training produced a NaN gradient or loss."""


class EmptySceneError(VoxfuseError, ValueError):
    """A scene layout has no primitives."""
