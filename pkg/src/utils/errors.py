"""
Error types shared by every gazetrace service.

Each error carries the process exit code the CLI uses for it:
2 for configuration problems, 3 for bad input data, 4 for anything else.
"""
from typing import Optional


class GazeTraceError(Exception):
    exit_code = 4


class ConfigError(GazeTraceError):
    """Bad or missing configuration: run config, scene, gallery, overrides."""
    exit_code = 2


class DataError(GazeTraceError):
    """Input data that violates its format or invariants."""
    exit_code = 3


class FrameParseError(DataError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class StreamOrderError(FrameParseError):
    pass


class RasterFormatError(DataError):
    pass


class ScriptError(DataError):
    """Infeasible synthetic scenario script."""


class InsufficientDepthError(DataError):
    def __init__(self, message: str, valid_fraction: float = 0.0):
        self.valid_fraction = valid_fraction
        super().__init__(message)


class GeometryError(DataError):
    pass


class InvalidDepthError(GeometryError):
    pass


class OutOfBoundsError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class UndefinedSimilarityError(GeometryError):
    pass


class SceneConflictError(GeometryError):
    pass
