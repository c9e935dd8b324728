"""
Frame-to-frame association of face detections into tracklets.

Detections are linked by centroid distance with an optimal assignment;
pairs farther apart than max_distance_px never match, and a tracklet
that goes unmatched for more than max_gap_frames is lost for good.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from src.models.records import Detection, FrameRecord
from src.utils.errors import StreamOrderError

logger = logging.getLogger(__name__)


class TrackletState(str, Enum):
    ACTIVE = "active"
    LOST = "lost"


@dataclass
class Tracklet:
    tracklet_id: int
    detections: List[Detection] = field(default_factory=list)
    state: TrackletState = TrackletState.ACTIVE

    @property
    def last_seen(self) -> int:
        return self.detections[-1].frame_index

    @property
    def first_seen(self) -> int:
        return self.detections[0].frame_index

    @property
    def last_centroid(self) -> Tuple[float, float]:
        return self.detections[-1].centroid


@dataclass(frozen=True)
class TrackingParams:
    max_distance_px: float = 75.0
    max_gap_frames: int = 15


class TrackingService:
    def __init__(self, params: Optional[TrackingParams] = None):
        self.params = params or TrackingParams()
        self.next_id = 0

    def _spawn(self, det: Detection) -> Tracklet:
        tracklet = Tracklet(tracklet_id=self.next_id, detections=[det])
        self.next_id += 1
        logger.debug(f"[TrackingService] spawned tracklet {tracklet.tracklet_id} at frame {det.frame_index}")
        return tracklet

    def associate_frame(
        self,
        active: Sequence[Tracklet],
        detections: Sequence[Detection],
        frame_index: Optional[int] = None,
    ) -> Tuple[List[Tracklet], List[Tracklet]]:
        """
        Match one frame's detections to the active tracklets.

        Returns the input tracklets (matched ones extended, stale ones
        marked lost) and the tracklets spawned by unmatched detections.
        """
        if detections:
            frame_index = detections[0].frame_index
            if any(d.frame_index != frame_index for d in detections):
                raise StreamOrderError("detections passed to associate_frame span several frames")
        if frame_index is None:
            return list(active), []

        for t in active:
            if t.state is TrackletState.ACTIVE and t.last_seen >= frame_index:
                raise StreamOrderError(
                    f"frame {frame_index} is not after tracklet {t.tracklet_id}'s last frame {t.last_seen}"
                )

        candidates: List[Tracklet] = []
        for t in active:
            if t.state is not TrackletState.ACTIVE:
                continue
            if frame_index - t.last_seen > self.params.max_gap_frames:
                t.state = TrackletState.LOST
                logger.debug(f"[TrackingService] tracklet {t.tracklet_id} lost at frame {frame_index}")
            else:
                candidates.append(t)

        matched_dets = set()
        if candidates and detections:
            cost = cdist(
                np.array([t.last_centroid for t in candidates], dtype=np.float64),
                np.array([d.centroid for d in detections], dtype=np.float64),
            )
            feasible = cost <= self.params.max_distance_px
            # An infeasible pair costs more than any full set of feasible pairs,
            # so the solver first maximizes feasible matches, then minimizes distance
            cap = self.params.max_distance_px * (min(cost.shape) + 1) + 1.0
            rows, cols = linear_sum_assignment(np.where(feasible, cost, cap))
            for r, c in zip(rows, cols):
                if feasible[r, c]:
                    candidates[r].detections.append(detections[c])
                    matched_dets.add(c)

        new = [self._spawn(d) for i, d in enumerate(detections) if i not in matched_dets]
        return list(active), new

    def finalize_tracklets(self, all_tracklets: Sequence[Tracklet], end_frame: int) -> List[Tracklet]:
        """Close the session: every tracklet ends up lost with a frozen detection list."""
        finalized = []
        for t in all_tracklets:
            t.state = TrackletState.LOST
            t.detections = tuple(t.detections)
            finalized.append(t)
        logger.info(f"[TrackingService] finalized {len(finalized)} tracklets at frame {end_frame}")
        return finalized

    def track(self, frames: Iterable[FrameRecord]) -> List[Tracklet]:
        """Run association over a whole frame stream."""
        all_tracklets: List[Tracklet] = []
        active: List[Tracklet] = []
        end_frame = -1
        for frame in frames:
            _, new = self.associate_frame(active, frame.detections, frame_index=frame.frame_index)
            all_tracklets.extend(new)
            active = [t for t in active if t.state is TrackletState.ACTIVE] + new
            end_frame = frame.frame_index
        return self.finalize_tracklets(all_tracklets, end_frame)


def detection_owners(tracklets: Iterable[Tracklet]) -> Dict[Tuple[int, int], int]:
    """(frame_index, detection index) -> tracklet_id"""
    owners: Dict[Tuple[int, int], int] = {}
    for t in tracklets:
        for d in t.detections:
            owners[(d.frame_index, d.index)] = t.tracklet_id
    return owners
