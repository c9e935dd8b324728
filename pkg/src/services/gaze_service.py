"""
Per-frame gaze encoding: sample face depth, place participants in 3D,
cast each gaze ray and record what it hits first.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.models.records import BBox, Detection, FrameRecord, GazeEvent
from src.services.raycast_service import BVH, build_scene_index, build_static_bvh, closest_hit
from src.services.reid_service import UNIDENTIFIED
from src.services.scene_service import DynamicOOI, SceneModel, assemble_frame_scene, build_dynamic_ooi
from src.utils.errors import GeometryError, InsufficientDepthError
from src.utils.format_utils import round_float, round_vector
from src.utils.geometry import (
    GAZE_AXIS,
    CameraIntrinsics,
    GazeAngles,
    Ray,
    angles_to_direction,
    apply,
    gaze_transform,
    project,
)

logger = logging.getLogger(__name__)

MIN_VALID_FRACTION = 0.1


@dataclass(frozen=True)
class DepthRaster:
    width: int
    height: int
    values: np.ndarray  # (height, width) meters, NaN where invalid

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != (self.height, self.width):
            raise ValueError(f"raster values {values.shape} do not match {self.height}x{self.width}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def valid_fraction(self) -> float:
        v = self.values
        if v.size == 0:
            return 0.0
        return float(np.count_nonzero(np.isfinite(v) & (v > 0)) / v.size)

    def matches(self, k: CameraIntrinsics) -> bool:
        return self.width == k.width and self.height == k.height


def _central_window(bbox: BBox, width: int, height: int) -> Tuple[int, int, int, int]:
    """Pixel index ranges of the bbox shrunk to half its size about its centre."""
    x_min, y_min, x_max, y_max = bbox
    cx = (x_min + x_max) / 2.0
    cy = (y_min + y_max) / 2.0
    qw = (x_max - x_min) / 4.0
    qh = (y_max - y_min) / 4.0
    c0 = max(0, int(math.floor(cx - qw)))
    c1 = min(width, max(c0 + 1, int(math.ceil(cx + qw))))
    r0 = max(0, int(math.floor(cy - qh)))
    r1 = min(height, max(r0 + 1, int(math.ceil(cy + qh))))
    return r0, r1, c0, c1


def sample_depth(raster: DepthRaster, bbox: BBox, min_valid_fraction: float = MIN_VALID_FRACTION) -> float:
    """Median of the valid depths inside the central half of a face box."""
    r0, r1, c0, c1 = _central_window(bbox, raster.width, raster.height)
    if r0 >= r1 or c0 >= c1:
        raise InsufficientDepthError(f"bbox {bbox} does not intersect the raster")
    region = raster.values[r0:r1, c0:c1].astype(np.float64).ravel()
    valid = region[np.isfinite(region) & (region > 0)]
    fraction = valid.size / region.size
    if fraction < min_valid_fraction:
        raise InsufficientDepthError(
            f"only {fraction:.0%} of {region.size} depth samples valid", valid_fraction=fraction
        )
    return float(np.median(valid))


def make_gaze_ray(face: DynamicOOI, angles: GazeAngles) -> Ray:
    return Ray(origin=face.face_box.center.copy(), direction=angles_to_direction(angles))


def gaze_ray_from_transform(face: DynamicOOI, angles: GazeAngles) -> Ray:
    """The same ray, built by placing the canonical gaze ray with the face's gaze transform."""
    m = gaze_transform(face.face_box.center, angles_to_direction(angles))
    origin = apply(m, np.zeros(3))
    direction = m.rotation @ GAZE_AXIS
    return Ray(origin=origin, direction=direction / np.linalg.norm(direction))


@dataclass
class FrameResult:
    frame_index: int
    events: List[GazeEvent] = field(default_factory=list)
    drops: List[dict] = field(default_factory=list)
    warnings: List[dict] = field(default_factory=list)


class GazeService:
    """Holds the session's static scene and its cached BVH; encode_frame is thread-safe."""

    def __init__(
        self,
        scene: SceneModel,
        static_bvh: Optional[BVH] = None,
        min_valid_fraction: float = MIN_VALID_FRACTION,
    ):
        self.scene = scene
        self.static_bvh = static_bvh if static_bvh is not None else build_static_bvh(scene)
        self.min_valid_fraction = min_valid_fraction

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.scene.intrinsics

    def _face_depth(
        self, frame: FrameRecord, det: Detection, raster: Optional[DepthRaster]
    ) -> Tuple[Optional[float], Optional[str]]:
        if frame.has_inline_depth:
            if det.depth_m is None:
                return None, "missing_depth"
            return det.depth_m, None
        if raster is None:
            return None, "missing_depth"
        if not raster.matches(self.intrinsics):
            return None, "depth_raster_mismatch"
        try:
            return sample_depth(raster, det.bbox, self.min_valid_fraction), None
        except InsufficientDepthError:
            return None, "insufficient_depth"

    def encode_frame(
        self,
        frame: FrameRecord,
        identities: Dict[int, str],
        raster: Optional[DepthRaster] = None,
        tracklets: Optional[Dict[int, int]] = None,
    ) -> FrameResult:
        """
        One gaze event per identified detection with gaze and depth.

        identities maps detection index -> participant id for this frame.
        Anything that cannot be encoded is recorded in the result's drops.
        """
        k = self.intrinsics
        result = FrameResult(frame.frame_index)
        tracklets = tracklets or {}

        def drop(det: Detection, reason: str, identity: str = UNIDENTIFIED):
            result.drops.append({
                "frame_index": frame.frame_index,
                "detection_index": det.index,
                "tracklet_id": tracklets.get(det.index),
                "identity": identity,
                "reason": reason,
            })

        placed: List[Tuple[Detection, DynamicOOI]] = []
        seen = set()
        for det in frame.detections:
            identity = identities.get(det.index, UNIDENTIFIED)
            if identity == UNIDENTIFIED:
                drop(det, "unidentified")
                continue
            if identity in seen:
                drop(det, "duplicate_identity", identity)
                continue
            if det.gaze is None:
                drop(det, "missing_gaze", identity)
                continue
            clamped = det.clamped(k)
            if clamped is None:
                drop(det, "outside_image", identity)
                continue
            depth, reason = self._face_depth(frame, clamped, raster)
            if depth is None:
                drop(det, reason, identity)
                continue
            try:
                ooi = build_dynamic_ooi(clamped, identity, depth, k, self.scene.floor_y, self.scene.body_dims)
            except GeometryError as e:
                logger.debug(f"[GazeService] frame {frame.frame_index}: {e}")
                drop(det, "invalid_geometry", identity)
                continue
            if ooi.clamped_to_floor:
                result.warnings.append({
                    "frame_index": frame.frame_index,
                    "detection_index": det.index,
                    "identity": identity,
                    "reason": "face_below_floor",
                })
            seen.add(identity)
            placed.append((det, ooi))

        if not placed:
            return result

        frame_scene = assemble_frame_scene(
            self.scene.static, [ooi for _, ooi in placed], self.scene.floor_y, frame.frame_index
        )
        index = build_scene_index(frame_scene, self.static_bvh)

        for det, ooi in placed:
            ray = make_gaze_ray(ooi, det.gaze)
            hit = closest_hit(ray, index, exclude=frame_scene.mesh_ids_for(ooi.participant_id))
            result.events.append(_event(frame, ooi.participant_id, hit, k))
        return result


def _event(frame: FrameRecord, observer: str, hit, k: CameraIntrinsics) -> GazeEvent:
    if hit is None:
        return GazeEvent(frame_index=frame.frame_index, timestamp=frame.timestamp_s, observer=observer)
    hit_pixel = None
    if hit.point[2] > 0:
        hit_pixel = tuple(round_vector(project(hit.point, k)))
    return GazeEvent(
        frame_index=frame.frame_index,
        timestamp=frame.timestamp_s,
        observer=observer,
        target=hit.ooi_label,
        hit_point=tuple(round_vector(hit.point)),
        t_min=round_float(hit.t),
        hit_pixel=hit_pixel,
    )


def attribute_durations(
    events: List[GazeEvent], frame_times: Dict[int, float], fps: float
) -> List[GazeEvent]:
    """
    Each event lasts until the next frame of the stream; the last frame
    gets the nominal 1/fps.
    """
    ordered = sorted(frame_times.items())
    durations: Dict[int, float] = {}
    for (f, t), (_, t_next) in zip(ordered, ordered[1:]):
        durations[f] = max(0.0, t_next - t)
    if ordered:
        durations[ordered[-1][0]] = 1.0 / fps
    return [e.model_copy(update={"duration_s": durations.get(e.frame_index, 1.0 / fps)}) for e in events]
