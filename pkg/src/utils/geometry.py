"""
Camera model and the 2D <-> 3D math every service builds on.

Coordinates are the usual pinhole camera frame: +x right, +y down,
+z into the scene, camera at the origin, meters.
"""
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import BehindCameraError, InvalidDepthError, OutOfBoundsError

TOLERANCE = 1e-9

# Reference gaze axis: a subject with zero pitch and yaw looks straight at the camera
GAZE_AXIS = np.array([0.0, 0.0, -1.0])

Pixel = Tuple[float, float]


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float = Field(ge=0)
    cy: float = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @model_validator(mode="after")
    def _principal_point_inside(self):
        if self.cx >= self.width or self.cy >= self.height:
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        return self

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height


class GazeAngles(BaseModel):
    """Gaze provider output in radians."""
    model_config = ConfigDict(frozen=True)

    pitch: float = Field(ge=-math.pi / 2, le=math.pi / 2)
    yaw: float = Field(ge=-math.pi, le=math.pi)


def vec3(x: float, y: float, z: float) -> np.ndarray:
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > TOLERANCE:
            raise ValueError(f"ray direction must be unit length, got norm {norm}")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def _check_rotation(rotation: np.ndarray) -> None:
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    if not np.allclose(rotation.T @ rotation, np.eye(3), rtol=0.0, atol=TOLERANCE):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > TOLERANCE:
        raise ValueError("rotation determinant is not +1")


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        _check_rotation(self.rotation)
        if self.translation.shape != (3,):
            raise ValueError(f"translation must have 3 components, got {self.translation.shape}")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, translation) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(translation, dtype=np.float64))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def apply(m: RigidTransform, v: np.ndarray) -> np.ndarray:
    """Apply to a point (3,) or a batch of points (N, 3)."""
    v = np.asarray(v, dtype=np.float64)
    return v @ m.rotation.T + m.translation


def back_project(p: Pixel, z: float, k: CameraIntrinsics, check_bounds: bool = True) -> np.ndarray:
    x, y = p
    if not z > 0:
        raise InvalidDepthError(f"depth must be positive, got {z}")
    if check_bounds and not k.contains(x, y):
        raise OutOfBoundsError(f"pixel ({x}, {y}) outside image {k.width}x{k.height}")
    return np.array([z * (x - k.cx) / k.fx, z * (y - k.cy) / k.fy, z], dtype=np.float64)


def project(v: np.ndarray, k: CameraIntrinsics) -> Pixel:
    if not v[2] > 0:
        raise BehindCameraError(f"point {tuple(v)} is behind the camera")
    return (k.fx * v[0] / v[2] + k.cx, k.fy * v[1] / v[2] + k.cy)


def back_project_many(pixels: np.ndarray, z: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Vectorized back_project without bounds checks: pixels (N, 2), z (N,) -> (N, 3)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise InvalidDepthError("depth must be positive")
    return np.stack(
        [z * (pixels[:, 0] - k.cx) / k.fx, z * (pixels[:, 1] - k.cy) / k.fy, z], axis=1
    )


def project_many(points: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if np.any(points[:, 2] <= 0):
        raise BehindCameraError("points behind the camera")
    return np.stack(
        [k.fx * points[:, 0] / points[:, 2] + k.cx, k.fy * points[:, 1] / points[:, 2] + k.cy],
        axis=1,
    )


def angles_to_direction(g: GazeAngles) -> np.ndarray:
    # Sign convention lives here only; flip it here if a gaze provider disagrees
    cp = math.cos(g.pitch)
    return np.array(
        [-math.sin(g.yaw) * cp, -math.sin(g.pitch), -cp * math.cos(g.yaw)], dtype=np.float64
    )


def direction_to_angles(d: np.ndarray) -> GazeAngles:
    """Inverse of angles_to_direction for a unit vector."""
    d = np.asarray(d, dtype=np.float64)
    pitch = math.asin(max(-1.0, min(1.0, -float(d[1]))))
    yaw = math.atan2(-float(d[0]), -float(d[2]))
    return GazeAngles(pitch=pitch, yaw=yaw)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def direction_to_rotation(d: np.ndarray) -> np.ndarray:
    """
    Minimal rotation taking GAZE_AXIS onto d.

    When d is antiparallel to GAZE_AXIS the rotation is not unique; the
    fixed 180 degree turn about +y is returned.
    """
    d = np.asarray(d, dtype=np.float64)
    # GAZE_AXIS x d = (d_y, -d_x, 0); axis and sine come straight from d
    s = math.hypot(float(d[0]), float(d[1]))
    c = float(GAZE_AXIS @ d)
    if s == 0.0:
        if c > 0:
            return np.eye(3)
        return np.diag([-1.0, 1.0, -1.0])
    axis = np.array([d[1] / s, -d[0] / s, 0.0])
    one_minus_c = s * s / (1.0 + c) if c > 0 else 1.0 - c
    kx = _skew(axis)
    return np.eye(3) + s * kx + one_minus_c * (kx @ kx)


def gaze_transform(origin: np.ndarray, d: np.ndarray) -> RigidTransform:
    """Placement of the canonical gaze ray at a face: rotation onto d, translation to origin."""
    return RigidTransform(direction_to_rotation(d), np.asarray(origin, dtype=np.float64))


def aabb_of(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points.min(axis=0), points.max(axis=0)
