"""Exception hierarchy shared by every module."""

from typing import Any, List, Sequence


class ExperimentError(Exception):
    """Base class for all framework errors."""


class InvalidArgumentError(ExperimentError, ValueError):
    """An argument is outside its documented domain."""


class ShapeError(ExperimentError, ValueError):
    """Tensor or sequence shapes do not line up."""


class NumericError(ExperimentError, ArithmeticError):
    """A computation produced non-finite values."""


class StateError(ExperimentError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class IncompatibleArchitectureError(ExperimentError):
    """A checkpoint does not fit the architecture it is applied to."""


class CorruptCheckpointError(ExperimentError):
    """A checkpoint file could not be decoded."""


class DegenerateClassError(ExperimentError, ValueError):
    """A class that must be present has no items."""


class StratificationError(ExperimentError, ValueError):
    """A class is too small for a stratified split."""


class ConfigError(ExperimentError, ValueError):
    """The experiment configuration is invalid."""


class IncompleteGridError(ExperimentError):
    """A sweep result does not cover the configured grid."""

    def __init__(self, missing: Sequence[Any]):
        self.missing: List[Any] = list(missing)
        preview = ", ".join(str(c) for c in self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"Incomplete grid, missing {len(self.missing)} cells: {preview}{more}")


class SweepCellError(ExperimentError):
    """A single sweep cell failed; carries the failing coordinate."""

    def __init__(self, coordinate: Any, cause: BaseException):
        self.coordinate = coordinate
        self.cause = cause
        super().__init__(f"Sweep cell {coordinate} failed: {cause}")
