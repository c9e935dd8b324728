"""
Scene model: static objects of interest loaded once per session, plus the
per-frame face and body boxes placed for every identified participant.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import trimesh
from pydantic import BaseModel, Field, ValidationError

from src.models.records import NONE_LABEL, Detection
from src.utils.errors import ConfigError, SceneConflictError
from src.utils.geometry import CameraIntrinsics, RigidTransform, apply, back_project

logger = logging.getLogger(__name__)

MIN_TRIANGLE_AREA = 1e-12
FLOOR_LABEL = "FLOOR"
DEFAULT_BODY_DIMS = (0.5, 1.7, 0.3)
RESERVED_LABELS = {NONE_LABEL, "UNIDENTIFIED"}

# Unit cube centred on the origin: 8 vertices, 12 outward-wound triangles
_UNIT_BOX = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
_UNIT_BOX_VERTICES = np.asarray(_UNIT_BOX.vertices, dtype=np.float64)
_UNIT_BOX_FACES = np.asarray(_UNIT_BOX.faces, dtype=np.int64)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    name: str = ""

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @property
    def corners(self) -> np.ndarray:
        """(M, 3, 3) triangle vertex coordinates."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def validate(self) -> None:
        if not np.all(np.isfinite(self.vertices)):
            raise ConfigError(f"mesh {self.name!r} has non-finite vertices")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ConfigError(f"mesh {self.name!r} has triangle indices out of range")
        degenerate = np.flatnonzero(self.triangle_areas() <= MIN_TRIANGLE_AREA)
        if degenerate.size:
            raise ConfigError(f"mesh {self.name!r} has degenerate triangles {degenerate[:10].tolist()}")

    def transformed(self, pose: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(apply(pose, self.vertices), self.triangles, self.name)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: centre and full extents, meters."""
    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "extents", np.asarray(self.extents, dtype=np.float64))
        if np.any(self.extents <= 0):
            raise ValueError(f"box extents must be positive, got {self.extents}")

    @property
    def min(self) -> np.ndarray:
        return self.center - self.extents / 2.0

    @property
    def max(self) -> np.ndarray:
        return self.center + self.extents / 2.0

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls((lo + hi) / 2.0, hi - lo)


@dataclass(frozen=True)
class StaticOOI:
    label: str
    mesh: TriangleMesh
    pose: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass(frozen=True)
class DynamicOOI:
    participant_id: str
    face_box: Box
    body_box: Box
    frame_index: int
    clamped_to_floor: bool = False


@dataclass(frozen=True)
class SceneMesh:
    mesh_id: int
    label: str
    mesh: TriangleMesh


@dataclass(frozen=True)
class FrameScene:
    frame_index: int
    static: Tuple[StaticOOI, ...]
    dynamic: Tuple[DynamicOOI, ...]
    floor_y: float

    def static_meshes(self) -> List[SceneMesh]:
        return [SceneMesh(i, s.label, s.mesh) for i, s in enumerate(self.static)]

    def dynamic_meshes(self) -> List[SceneMesh]:
        base = len(self.static)
        meshes = []
        for j, d in enumerate(self.dynamic):
            meshes.append(SceneMesh(base + 2 * j, d.participant_id, box_to_mesh(d.face_box, f"{d.participant_id}:face")))
            meshes.append(SceneMesh(base + 2 * j + 1, d.participant_id, box_to_mesh(d.body_box, f"{d.participant_id}:body")))
        return meshes

    def mesh_ids_for(self, participant_id: str) -> Tuple[int, int]:
        """Face and body mesh ids of one participant."""
        base = len(self.static)
        for j, d in enumerate(self.dynamic):
            if d.participant_id == participant_id:
                return (base + 2 * j, base + 2 * j + 1)
        raise KeyError(participant_id)


@dataclass(frozen=True)
class SceneModel:
    intrinsics: CameraIntrinsics
    floor_y: float
    static: Tuple[StaticOOI, ...]
    body_dims: Tuple[float, float, float] = DEFAULT_BODY_DIMS

    @property
    def labels(self) -> List[str]:
        return [s.label for s in self.static]

    @property
    def triangle_count(self) -> int:
        return sum(len(s.mesh.triangles) for s in self.static)


class PoseConfig(BaseModel):
    rotation: List[float] = Field(default_factory=lambda: [1, 0, 0, 0, 1, 0, 0, 0, 1], min_length=9, max_length=9)
    translation: List[float] = Field(default_factory=lambda: [0, 0, 0], min_length=3, max_length=3)


class StaticConfig(BaseModel):
    label: str = Field(min_length=1)
    mesh: str
    pose: PoseConfig = Field(default_factory=PoseConfig)


class FloorConfig(BaseModel):
    half_extent: float = Field(gt=0)


class SceneConfig(BaseModel):
    intrinsics: CameraIntrinsics
    floor_y: float
    static: List[StaticConfig] = Field(default_factory=list)
    body_dims: Tuple[float, float, float] = DEFAULT_BODY_DIMS
    floor: Optional[FloorConfig] = None


def load_mesh(path: Path, name: str) -> TriangleMesh:
    """Read an OBJ file; polygons are triangulated by the loader."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"mesh file for {name!r} not found: {path}")
    try:
        loaded = trimesh.load(str(path), file_type="obj", force="mesh", process=False)
    except Exception as e:
        raise ConfigError(f"cannot read mesh for {name!r} from {path}: {e}") from e
    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
        raise ConfigError(f"mesh for {name!r} in {path} has no triangles")
    return TriangleMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces), name)


def floor_mesh(floor_y: float, half_extent: float) -> TriangleMesh:
    s = half_extent
    vertices = [(-s, floor_y, 0.0), (s, floor_y, 0.0), (s, floor_y, 2 * s), (-s, floor_y, 2 * s)]
    return TriangleMesh(np.array(vertices), np.array([(0, 1, 2), (0, 2, 3)]), FLOOR_LABEL)


def load_scene(path: Path) -> SceneModel:
    """Scene config JSON -> static OOIs in camera frame, floor plane, intrinsics."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scene config not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            config = SceneConfig(**json.load(f))
    except json.JSONDecodeError as e:
        raise ConfigError(f"scene config {path} is not valid JSON: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid scene config {path}: {e}") from e
    return build_scene(config, base_dir=path.parent)


def build_scene(config: SceneConfig, base_dir: Path = Path(".")) -> SceneModel:
    if any(d <= 0 for d in config.body_dims):
        raise ConfigError(f"body_dims must be positive, got {config.body_dims}")

    labels = [s.label for s in config.static]
    duplicates = sorted({l for l in labels if labels.count(l) > 1})
    if duplicates:
        raise ConfigError(f"duplicate static OOI labels: {', '.join(duplicates)}")
    reserved = sorted(set(labels) & RESERVED_LABELS)
    if reserved:
        raise ConfigError(f"reserved static OOI labels: {', '.join(reserved)}")

    statics: List[StaticOOI] = []
    for entry in config.static:
        try:
            pose = RigidTransform(
                np.asarray(entry.pose.rotation, dtype=np.float64).reshape(3, 3),
                np.asarray(entry.pose.translation, dtype=np.float64),
            )
        except ValueError as e:
            raise ConfigError(f"static OOI {entry.label!r} has an invalid pose: {e}") from e
        mesh_path = Path(entry.mesh)
        if not mesh_path.is_absolute():
            mesh_path = base_dir / mesh_path
        mesh = load_mesh(mesh_path, entry.label).transformed(pose)
        mesh.validate()
        statics.append(StaticOOI(entry.label, mesh, pose))

    if config.floor is not None and FLOOR_LABEL not in labels:
        statics.append(StaticOOI(FLOOR_LABEL, floor_mesh(config.floor_y, config.floor.half_extent)))

    scene = SceneModel(
        intrinsics=config.intrinsics,
        floor_y=float(config.floor_y),
        static=tuple(statics),
        body_dims=tuple(float(d) for d in config.body_dims),
    )
    logger.info(
        f"[SceneService] loaded {len(scene.static)} static OOIs, {scene.triangle_count} triangles"
    )
    return scene


def box_to_mesh(box: Box, name: str = "") -> TriangleMesh:
    return TriangleMesh(_UNIT_BOX_VERTICES * box.extents + box.center, _UNIT_BOX_FACES, name)


def build_dynamic_ooi(
    det: Detection,
    participant_id: str,
    depth: float,
    k: CameraIntrinsics,
    floor_y: float,
    body_dims: Sequence[float] = DEFAULT_BODY_DIMS,
) -> DynamicOOI:
    """
    Place a participant's face box from its pixel box and depth, and hang a
    fixed-footprint body box from the face down to the floor.
    """
    center = back_project(det.centroid, depth, k)
    px_w, px_h = det.size_px
    face_w = px_w * depth / k.fx
    face_h = px_h * depth / k.fy
    face_extents = np.array([face_w, face_h, face_w])

    clamped = False
    if center[1] > floor_y:
        logger.warning(
            f"[SceneService] face of {participant_id} at frame {det.frame_index} is below the floor "
            f"(y={center[1]:.3f} > {floor_y:.3f}); clamping to floor"
        )
        center = np.array([center[0], floor_y - face_h / 2.0, center[2]])
        clamped = True
    face_box = Box(center, face_extents)

    body_w = max(float(body_dims[0]), face_w)
    body_d = max(float(body_dims[2]), face_w)
    top = face_box.min[1]
    body_box = Box.from_bounds(
        (center[0] - body_w / 2.0, top, center[2] - body_d / 2.0),
        (center[0] + body_w / 2.0, floor_y, center[2] + body_d / 2.0),
    )
    return DynamicOOI(participant_id, face_box, body_box, det.frame_index, clamped)


def assemble_frame_scene(
    static: Sequence[StaticOOI], dynamics: Sequence[DynamicOOI], floor_y: float, frame_index: Optional[int] = None
) -> FrameScene:
    if dynamics:
        frames = {d.frame_index for d in dynamics}
        if len(frames) != 1:
            raise SceneConflictError(f"dynamic OOIs from several frames: {sorted(frames)}")
        frame_index = frames.pop()
    seen: Dict[str, int] = {}
    for d in dynamics:
        if d.participant_id in seen:
            raise SceneConflictError(
                f"participant {d.participant_id} placed twice in frame {d.frame_index}"
            )
        seen[d.participant_id] = 1
    if not isinstance(static, tuple):
        static = tuple(static)
    return FrameScene(
        frame_index=-1 if frame_index is None else frame_index,
        static=static,
        dynamic=tuple(dynamics),
        floor_y=float(floor_y),
    )
