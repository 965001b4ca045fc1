"""
opflayer error classes
"""

from typing import Any, List, Optional


class OpfLayerError(Exception):
    """Base library error"""

    def __init__(self, message: str, detail: Optional[dict] = None):
        self.message = message
        self.detail = detail or {}
        super().__init__(message)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(message={self.message!r}, detail={self.detail})"

    def __str__(self) -> str:
        return self.message


def _with(detail: Optional[dict], key: str, value: Any) -> dict:
    if detail is None:
        detail = {}
    if value is not None:
        detail[key] = value
    return detail


class CaseParseError(OpfLayerError):
    """Malformed row in a case file"""

    def __init__(self, message: str, line: Optional[int] = None, detail: Optional[dict] = None):
        self.line = line
        super().__init__(message, _with(detail, "line", line))


class CaseStructureError(OpfLayerError):
    """Case file is missing a matrix or breaks a structural invariant"""

    def __init__(self, message: str, matrix: Optional[str] = None, detail: Optional[dict] = None):
        self.matrix = matrix
        super().__init__(message, _with(detail, "matrix", matrix))


class UnsupportedTopologyError(OpfLayerError):
    """Network layout the partition cannot express"""

    def __init__(self, message: str, bus: Optional[int] = None, detail: Optional[dict] = None):
        self.bus = bus
        super().__init__(message, _with(detail, "bus", bus))


class ConnectivityError(OpfLayerError):
    """Isolated bus"""

    def __init__(self, message: str, bus: Optional[int] = None, detail: Optional[dict] = None):
        self.bus = bus
        super().__init__(message, _with(detail, "bus", bus))


class FactorizationError(OpfLayerError):
    """A constant matrix could not be factorized"""

    def __init__(self, message: str, matrix: Optional[str] = None, detail: Optional[dict] = None):
        self.matrix = matrix
        super().__init__(message, _with(detail, "matrix", matrix))


class SingularJacobianError(OpfLayerError):
    """Power-flow Jacobian is singular at the given iterate"""

    def __init__(self, message: str, iterate: Any = None, detail: Optional[dict] = None):
        # the iterate is kept on the instance only; detail stays JSON friendly
        self.iterate = iterate
        super().__init__(message, detail)


class SolverDivergedError(OpfLayerError):
    """Non-finite or runaway mismatch inside an iteration"""

    def __init__(
        self, message: str, iteration: Optional[int] = None, detail: Optional[dict] = None
    ):
        self.iteration = iteration
        super().__init__(message, _with(detail, "iteration", iteration))


class ReferenceDataError(OpfLayerError):
    """Reference-solution table is invalid or incomplete"""

    def __init__(
        self, message: str, indices: Optional[List[int]] = None, detail: Optional[dict] = None
    ):
        self.indices = list(indices) if indices is not None else None
        super().__init__(message, _with(detail, "indices", self.indices))


class TrainingAbortedError(OpfLayerError):
    """Too many samples diverged during an epoch"""

    def __init__(self, message: str, epoch: Optional[int] = None, detail: Optional[dict] = None):
        self.epoch = epoch
        super().__init__(message, _with(detail, "epoch", epoch))


class CheckpointError(OpfLayerError):
    """Checkpoint cannot be used with this grid"""

    def __init__(self, message: str, path: Optional[str] = None, detail: Optional[dict] = None):
        self.path = path
        super().__init__(message, _with(detail, "path", path))


class ConfigError(OpfLayerError):
    """Invalid configuration"""

    def __init__(self, message: str, key: Optional[str] = None, detail: Optional[dict] = None):
        self.key = key
        super().__init__(message, _with(detail, "key", key))
