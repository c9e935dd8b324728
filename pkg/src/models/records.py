"""
Per-frame perception records and the gaze events derived from them
"""
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.utils.geometry import CameraIntrinsics, GazeAngles

NONE_LABEL = "NONE"
INLINE_DEPTH = "inline"

BBox = Tuple[float, float, float, float]


class Detection(BaseModel):
    """One face detection: pixel box plus whatever the upstream models produced for it."""
    model_config = ConfigDict(frozen=True)

    frame_index: int = Field(default=0, ge=0)
    index: int = Field(default=0, ge=0)  # position within its frame
    bbox: BBox
    embedding: Optional[Tuple[float, ...]] = None
    gaze: Optional[GazeAngles] = None
    depth_m: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _ordered_bbox(self):
        x_min, y_min, x_max, y_max = self.bbox
        if not x_min < x_max:
            raise ValueError(f"bbox x_min {x_min} must be < x_max {x_max}")
        if not y_min < y_max:
            raise ValueError(f"bbox y_min {y_min} must be < y_max {y_max}")
        return self

    @property
    def centroid(self) -> Tuple[float, float]:
        x_min, y_min, x_max, y_max = self.bbox
        return ((x_min + x_max) / 2.0, (y_min + y_max) / 2.0)

    @property
    def size_px(self) -> Tuple[float, float]:
        x_min, y_min, x_max, y_max = self.bbox
        return (x_max - x_min, y_max - y_min)

    def clamped(self, k: CameraIntrinsics) -> Optional["Detection"]:
        """Box clipped to the image; None when nothing of it is inside."""
        x_min, y_min, x_max, y_max = self.bbox
        clipped = (
            min(max(x_min, 0.0), k.width),
            min(max(y_min, 0.0), k.height),
            min(max(x_max, 0.0), k.width),
            min(max(y_max, 0.0), k.height),
        )
        if clipped == self.bbox:
            return self
        if not (clipped[0] < clipped[2] and clipped[1] < clipped[3]):
            return None
        return self.model_copy(update={"bbox": clipped})


class FrameRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_index: int = Field(ge=0)
    timestamp_s: float = Field(ge=0)
    detections: List[Detection] = Field(default_factory=list)
    depth_ref: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def _stamp_detections(cls, data):
        # detections in the stream don't repeat their frame index
        if isinstance(data, dict) and isinstance(data.get("detections"), list):
            stamped = []
            for i, det in enumerate(data["detections"]):
                if isinstance(det, dict):
                    det = {**det, "frame_index": data.get("frame_index", 0), "index": i}
                stamped.append(det)
            data = {**data, "detections": stamped}
        return data

    @property
    def has_inline_depth(self) -> bool:
        return self.depth_ref == INLINE_DEPTH


class GazeEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_index: int
    timestamp: float
    observer: str
    target: str = NONE_LABEL
    hit_point: Optional[Tuple[float, float, float]] = None
    t_min: Optional[float] = None
    hit_pixel: Optional[Tuple[float, float]] = None
    duration_s: Optional[float] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _target_matches_hit(self):
        if (self.target == NONE_LABEL) != (self.hit_point is None):
            raise ValueError("target is NONE exactly when there is no hit point")
        if self.target == self.observer:
            raise ValueError(f"observer {self.observer} cannot be its own gaze target")
        return self

    @property
    def is_hit(self) -> bool:
        return self.target != NONE_LABEL
