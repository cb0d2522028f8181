"""Exception hierarchy shared by every anyexperts module."""

from typing import Any, Optional, Sequence


class AnyExpertsError(Exception):
    """Base exception for anyexperts errors."""

    def __init__(self, message: str, details: Optional[dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)


class DimensionError(AnyExpertsError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, shapes: Sequence[tuple[int, ...]] = ()):
        self.shapes = tuple(tuple(s) for s in shapes)
        if self.shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in self.shapes)})"
        super().__init__(message, {"shapes": self.shapes})


class ContractError(AnyExpertsError):
    """Raised when a caller violates an operation's precondition."""


class ConfigError(AnyExpertsError):
    """Raised for invalid configuration values, keys or config-file syntax."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"{key}: "
        super().__init__(prefix + message, {"key": key, "line": line})


class NumericError(AnyExpertsError):
    """Raised when a computation produces a non-finite value."""

    def __init__(self, message: str, coordinate: Optional[tuple[str, int]] = None):
        self.coordinate = coordinate
        if coordinate is not None:
            message = f"{message} at {coordinate[0]}[{coordinate[1]}]"
        super().__init__(message, {"coordinate": coordinate})


class TrainingDivergedError(NumericError):
    """Raised when the training objective becomes non-finite."""

    def __init__(self, step: int, components: dict[str, float], cause: str = ""):
        self.step = step
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items()) or "none computed"
        message = f"non-finite loss at step {step} ({parts})"
        if cause:
            message += f": {cause}"
        super().__init__(message)
        self.details.update({"step": step, "components": self.components})


class InvariantViolation(AnyExpertsError):
    """Raised when an internal invariant does not hold."""


class CheckpointError(AnyExpertsError):
    """Raised when a checkpoint cannot be read or does not match the expected layout."""
