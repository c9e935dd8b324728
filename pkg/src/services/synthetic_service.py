"""
Synthetic session generator.

A scenario script places static objects and moves participants along
waypoint trajectories while they follow a gaze-target schedule. The
generator renders what the perception models would have reported (face
boxes, embeddings, gaze angles, depth) with the exact inverse of the
pipeline's math, and writes the matching ground truth next to it.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from src.models.records import INLINE_DEPTH, NONE_LABEL, Detection, FrameRecord
from src.services.gaze_service import DepthRaster, make_gaze_ray
from src.services.io_service import write_depth_raster, write_frames
from src.services.raycast_service import build_scene_index, build_static_bvh, closest_hit
from src.services.reid_service import RESERVED_IDS
from src.services.scene_service import (
    DEFAULT_BODY_DIMS,
    Box,
    SceneConfig,
    assemble_frame_scene,
    box_to_mesh,
    build_dynamic_ooi,
    build_scene,
)
from src.utils.errors import ScriptError
from src.utils.format_utils import dumps_stable, round_float, round_vector
from src.utils.geometry import CameraIntrinsics, direction_to_angles, project

logger = logging.getLogger(__name__)


class QuadShape(BaseModel):
    center: Tuple[float, float, float]
    size: Tuple[float, float]
    facing: Literal["z", "x", "y"] = "z"  # axis the quad's normal points along
    subdivisions: int = Field(default=1, ge=1)


class BoxShape(BaseModel):
    center: Tuple[float, float, float]
    extents: Tuple[float, float, float]


class StaticScript(BaseModel):
    label: str
    quad: Optional[QuadShape] = None
    box: Optional[BoxShape] = None

    @model_validator(mode="after")
    def _one_shape(self):
        if (self.quad is None) == (self.box is None):
            raise ValueError(f"static {self.label!r} needs exactly one of quad or box")
        return self


class Waypoint(BaseModel):
    t: float = Field(ge=0)
    position: Tuple[float, float, float]


class GazeSpan(BaseModel):
    start: float
    end: float
    target: Optional[str] = None
    direction: Optional[Tuple[float, float, float]] = None

    @model_validator(mode="after")
    def _target_or_direction(self):
        if (self.target is None) == (self.direction is None):
            raise ValueError("a gaze span needs exactly one of target or direction")
        if self.end <= self.start:
            raise ValueError(f"gaze span end {self.end} must be after start {self.start}")
        return self


class Window(BaseModel):
    start: float
    end: float


class ParticipantScript(BaseModel):
    id: str
    waypoints: List[Waypoint] = Field(min_length=1)
    gaze: List[GazeSpan] = Field(default_factory=list)
    hidden: List[Window] = Field(default_factory=list)
    face_size: Tuple[float, float] = (0.16, 0.22)


class NoiseScript(BaseModel):
    centroid_px: float = Field(default=0.0, ge=0)
    embedding_sigma: float = Field(default=0.0, ge=0)
    depth_sigma: float = Field(default=0.0, ge=0)
    gaze_sigma: float = Field(default=0.0, ge=0)
    dropout: float = Field(default=0.0, ge=0, le=1)


class ScenarioScript(BaseModel):
    duration_s: float = Field(gt=0)
    fps: float = Field(default=30.0, gt=0)
    camera: CameraIntrinsics
    floor_y: float = 1.2
    body_dims: Tuple[float, float, float] = DEFAULT_BODY_DIMS
    embedding_dim: int = Field(default=32, ge=2)
    anchors_per_participant: int = Field(default=3, ge=1)
    anchor_sigma: float = Field(default=0.02, ge=0)
    threshold: float = Field(default=0.6, ge=-1, le=1)
    depth_mode: Literal["inline", "raster"] = "inline"
    background_depth: float = Field(default=10.0, gt=0)
    static: List[StaticScript] = Field(default_factory=list)
    participants: List[ParticipantScript] = Field(default_factory=list)
    noise: NoiseScript = Field(default_factory=NoiseScript)


@dataclass
class SyntheticSession:
    root: Path
    scene_path: Path
    gallery_path: Path
    frames_path: Path
    ground_truth_path: Path
    run_config_path: Path
    frame_count: int
    ground_truth: List[dict] = field(default_factory=list)


def load_script(source: Union[str, Path, dict]) -> ScenarioScript:
    if isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        if not path.is_file():
            raise ScriptError(f"scenario script not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) if path.suffix in (".yaml", ".yml") else json.load(f)
    try:
        return ScenarioScript(**data)
    except ValidationError as e:
        raise ScriptError(f"invalid scenario script: {e}") from e


def _quad_obj(quad: QuadShape) -> Tuple[List[Tuple[float, float, float]], List[Tuple[int, ...]]]:
    """Quad in local coordinates about the origin, split into an n x n grid of quads."""
    n = quad.subdivisions
    a, b = quad.size
    us = np.linspace(-a / 2.0, a / 2.0, n + 1)
    vs = np.linspace(-b / 2.0, b / 2.0, n + 1)
    vertices = []
    for v in vs:
        for u in us:
            if quad.facing == "z":
                vertices.append((float(u), float(v), 0.0))
            elif quad.facing == "x":
                vertices.append((0.0, float(v), float(u)))
            else:
                vertices.append((float(u), 0.0, float(v)))
    faces = []
    for j in range(n):
        for i in range(n):
            p = j * (n + 1) + i + 1  # OBJ indices are 1-based
            faces.append((p, p + 1, p + n + 2, p + n + 1))
    return vertices, faces


def _box_obj(box: BoxShape) -> Tuple[List[Tuple[float, float, float]], List[Tuple[int, ...]]]:
    mesh = box_to_mesh(Box(np.zeros(3), np.asarray(box.extents)))
    return [tuple(v) for v in mesh.vertices.tolist()], [tuple(int(i) + 1 for i in f) for f in mesh.triangles]


def _write_obj(path: Path, vertices, faces) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    lines += ["f " + " ".join(str(i) for i in face) for face in faces]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _in_windows(t: float, windows: List[Window]) -> bool:
    return any(w.start <= t < w.end for w in windows)


class SyntheticService:
    def __init__(self, script: ScenarioScript, seed: int = 0):
        self.script = script
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._check_feasible()

    def _check_feasible(self) -> None:
        s = self.script
        labels = [st.label for st in s.static]
        ids = [p.id for p in s.participants]
        clash = sorted(set(labels) & set(ids))
        if clash:
            raise ScriptError(f"names used for both static objects and participants: {clash}")
        for name in set(labels) | set(ids):
            if name in RESERVED_IDS:
                raise ScriptError(f"name {name!r} is reserved")
        if len(set(ids)) != len(ids):
            raise ScriptError("participant ids must be unique")
        known = set(labels) | set(ids)
        for p in s.participants:
            for w in p.waypoints:
                if w.position[2] <= 0:
                    raise ScriptError(f"participant {p.id} waypoint at t={w.t} is behind the camera")
                if w.position[1] >= s.floor_y:
                    raise ScriptError(f"participant {p.id} waypoint at t={w.t} is below the floor")
            times = [w.t for w in p.waypoints]
            if times != sorted(times):
                raise ScriptError(f"participant {p.id} waypoints are not in time order")
            for g in p.gaze:
                if g.target is not None and g.target not in known:
                    raise ScriptError(f"participant {p.id} gazes at unknown target {g.target!r}")
                if g.target == p.id:
                    raise ScriptError(f"participant {p.id} cannot gaze at itself")

    def position(self, p: ParticipantScript, t: float) -> np.ndarray:
        times = [w.t for w in p.waypoints]
        pos = np.array([w.position for w in p.waypoints], dtype=np.float64)
        return np.array([np.interp(t, times, pos[:, axis]) for axis in range(3)])

    def _aim_points(self, scene) -> Dict[str, np.ndarray]:
        return {s.label: s.mesh.vertices.mean(axis=0) for s in scene.static}

    def generate(self, out_dir: Union[str, Path]) -> SyntheticSession:
        s = self.script
        k = s.camera
        root = Path(out_dir)
        (root / "meshes").mkdir(parents=True, exist_ok=True)

        scene_path = self._write_scene(root)
        with open(scene_path, "r", encoding="utf-8") as f:
            scene = build_scene(SceneConfig(**json.load(f)), base_dir=root)
        static_bvh = build_static_bvh(scene)
        aims = self._aim_points(scene)

        bases, gallery_path = self._write_gallery(root)

        if s.depth_mode == "raster":
            (root / "depth").mkdir(exist_ok=True)

        frame_count = max(1, int(round(s.duration_s * s.fps)))
        frames: List[FrameRecord] = []
        truth: List[dict] = []
        written_rasters = set()

        for i in range(frame_count):
            t = i / s.fps
            timestamp = round_float(t)
            faces = {p.id: self.position(p, t) for p in s.participants}
            detections = []
            placed = []
            for p in s.participants:
                center = faces[p.id]
                if _in_windows(t, p.hidden):
                    continue
                u, v = project(center, k)
                if not k.contains(u, v):
                    continue
                if s.noise.dropout and self.rng.random() < s.noise.dropout:
                    continue
                z = float(center[2])
                hw = p.face_size[0] * k.fx / z / 2.0
                hh = p.face_size[1] * k.fy / z / 2.0
                if s.noise.centroid_px:
                    u += float(self.rng.normal(0.0, s.noise.centroid_px))
                    v += float(self.rng.normal(0.0, s.noise.centroid_px))
                bbox = (u - hw, v - hh, u + hw, v + hh)

                direction, intended = self._gaze_direction(p, t, center, faces, aims)
                gaze = None
                if direction is not None:
                    if s.noise.gaze_sigma:
                        direction = _unit(direction + self.rng.normal(0.0, s.noise.gaze_sigma, 3))
                    gaze = direction_to_angles(direction)

                embedding = bases[p.id]
                if s.noise.embedding_sigma:
                    embedding = _unit(embedding + self.rng.normal(0.0, s.noise.embedding_sigma, embedding.shape))

                depth = z + (float(self.rng.normal(0.0, s.noise.depth_sigma)) if s.noise.depth_sigma else 0.0)
                det = Detection(
                    frame_index=i,
                    index=len(detections),
                    bbox=tuple(round_vector(bbox)),
                    embedding=tuple(round_vector(embedding)),
                    gaze=gaze,
                    depth_m=round_float(depth) if s.depth_mode == "inline" else None,
                )
                detections.append(det)
                placed.append((p, det, z, intended))

            depth_ref = INLINE_DEPTH
            if s.depth_mode == "raster":
                depth_ref = self._write_raster(root, [(d, z) for _, d, z, _ in placed], written_rasters)
            frames.append(FrameRecord(
                frame_index=i, timestamp_s=timestamp, detections=detections, depth_ref=depth_ref
            ))
            truth.extend(self._ground_truth(scene, static_bvh, i, timestamp, placed))

        frames_path = root / "frames.jsonl"
        write_frames(frames_path, frames)
        truth_path = root / "ground_truth.jsonl"
        truth_path.write_text("".join(dumps_stable(row) + "\n" for row in truth), encoding="utf-8")
        run_config_path = root / "run.json"
        run_config_path.write_text(dumps_stable({
            "scene_path": "scene.json",
            "gallery_path": "gallery.json",
            "frames_path": "frames.jsonl",
            "output_dir": "out",
            "fps": s.fps,
            "seed": self.seed,
        }, indent=2) + "\n", encoding="utf-8")

        logger.info(f"[SyntheticService] generated {frame_count} frames, {len(truth)} ground-truth events")
        return SyntheticSession(
            root=root,
            scene_path=scene_path,
            gallery_path=gallery_path,
            frames_path=frames_path,
            ground_truth_path=truth_path,
            run_config_path=run_config_path,
            frame_count=frame_count,
            ground_truth=truth,
        )

    def _write_scene(self, root: Path) -> Path:
        s = self.script
        entries = []
        for st in s.static:
            if st.quad is not None:
                vertices, faces = _quad_obj(st.quad)
                center = st.quad.center
            else:
                vertices, faces = _box_obj(st.box)
                center = st.box.center
            mesh_name = f"meshes/{st.label.lower()}.obj"
            _write_obj(root / mesh_name, vertices, faces)
            entries.append({
                "label": st.label,
                "mesh": mesh_name,
                "pose": {"rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1], "translation": list(center)},
            })
        scene = {
            "intrinsics": s.camera.model_dump(),
            "floor_y": s.floor_y,
            "static": entries,
            "body_dims": list(s.body_dims),
        }
        path = root / "scene.json"
        path.write_text(dumps_stable(scene, indent=2) + "\n", encoding="utf-8")
        return path

    def _write_gallery(self, root: Path) -> Tuple[Dict[str, np.ndarray], Path]:
        s = self.script
        bases = {}
        participants = {}
        for p in s.participants:
            base = _unit(self.rng.normal(size=s.embedding_dim))
            bases[p.id] = base
            anchors = []
            for _ in range(s.anchors_per_participant):
                anchor = _unit(base + self.rng.normal(0.0, s.anchor_sigma, s.embedding_dim)) if s.anchor_sigma else base
                anchors.append(round_vector(anchor))
            participants[p.id] = anchors
        path = root / "gallery.json"
        path.write_text(dumps_stable({
            "dimension": s.embedding_dim,
            "threshold": s.threshold,
            "participants": participants,
        }) + "\n", encoding="utf-8")
        return bases, path

    def _gaze_direction(
        self, p: ParticipantScript, t: float, center: np.ndarray,
        faces: Dict[str, np.ndarray], aims: Dict[str, np.ndarray],
    ) -> Tuple[Optional[np.ndarray], str]:
        span = next((g for g in p.gaze if g.start <= t < g.end), None)
        if span is None:
            return None, NONE_LABEL
        if span.direction is not None:
            return _unit(np.asarray(span.direction, dtype=np.float64)), NONE_LABEL
        aim = faces[span.target] if span.target in faces else aims[span.target]
        return _unit(aim - center), span.target

    def _write_raster(self, root: Path, placed: List[Tuple[Detection, float]], written: set) -> str:
        k = self.script.camera
        values = np.full((k.height, k.width), self.script.background_depth, dtype=np.float32)
        # far faces first so nearer ones paint over them
        for det, z in sorted(placed, key=lambda dz: -dz[1]):
            x0, y0, x1, y1 = det.bbox
            c0, c1 = max(0, int(math.floor(x0))), min(k.width, int(math.ceil(x1)))
            r0, r1 = max(0, int(math.floor(y0))), min(k.height, int(math.ceil(y1)))
            depth = z
            if self.script.noise.depth_sigma:
                depth += float(self.rng.normal(0.0, self.script.noise.depth_sigma))
            values[r0:r1, c0:c1] = depth
        digest = hashlib.sha1(values.tobytes()).hexdigest()[:16]
        name = f"depth/{digest}.draster"
        if digest not in written:
            write_depth_raster(root / name, DepthRaster(k.width, k.height, values))
            written.add(digest)
        return name

    def _ground_truth(self, scene, static_bvh, frame_index: int, timestamp: float, placed) -> List[dict]:
        """Label every gazing participant by casting its ray through the true geometry."""
        s = self.script
        oois = []
        for p, det, z, _ in placed:
            det = det.clamped(s.camera) or det
            oois.append(build_dynamic_ooi(det, p.id, z, s.camera, s.floor_y, s.body_dims))
        if not oois:
            return []
        frame_scene = assemble_frame_scene(scene.static, oois, s.floor_y, frame_index)
        index = build_scene_index(frame_scene, static_bvh)
        rows = []
        for (p, det, _, intended), ooi in zip(placed, oois):
            if det.gaze is None:
                continue
            hit = closest_hit(make_gaze_ray(ooi, det.gaze), index, frame_scene.mesh_ids_for(p.id))
            rows.append({
                "frame_index": frame_index,
                "timestamp": timestamp,
                "observer": p.id,
                "target": hit.ooi_label if hit else NONE_LABEL,
                "intended": intended,
            })
        return rows


def generate_synthetic(script: Union[str, Path, dict, ScenarioScript], out_dir: Union[str, Path], seed: int = 0) -> SyntheticSession:
    if not isinstance(script, ScenarioScript):
        script = load_script(script)
    return SyntheticService(script, seed=seed).generate(out_dir)
