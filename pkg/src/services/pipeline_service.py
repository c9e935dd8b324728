"""
Session orchestration: frame stream in, gaze artifacts out.

Tracking and re-identification run sequentially in frame order. Once every
detection has an identity, frames are encoded independently on a worker
pool and the results are put back in frame order before analytics.
"""
import asyncio
import logging
import os
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import aiofiles

from src.models.records import FrameRecord, GazeEvent
from src.services.analytics_service import (
    build_network,
    network_to_dot,
    network_to_json,
    pool_timelines,
    summarize_attention,
    timeline_to_csv,
)
from src.services.gaze_service import DepthRaster, FrameResult, GazeService, attribute_durations
from src.services.io_service import events_to_jsonl, parse_frames, read_depth_raster
from src.services.reid_service import Gallery, ReIDService, ReIDTracklet, load_overrides
from src.services.scene_service import SceneModel, load_scene
from src.services.tracking_service import TrackingParams, TrackingService
from src.utils.config import RunConfig
from src.utils.errors import ConfigError, RasterFormatError
from src.utils.format_utils import dumps_stable, format_duration, round_float

logger = logging.getLogger(__name__)

ARTIFACTS = (
    "gaze_events.jsonl",
    "timeline.csv",
    "network.dot",
    "network.json",
    "summary.json",
    "diagnostics.json",
)
CHUNK_FRAMES = 64


class RasterCache:
    """Depth rasters by resolved path; consecutive frames often share one."""

    def __init__(self, base_dir: Path, maxsize: int = 32):
        self.base_dir = Path(base_dir)
        self._read = lru_cache(maxsize=maxsize)(read_depth_raster)

    def resolve(self, ref: str) -> Path:
        path = Path(ref)
        return path if path.is_absolute() else (self.base_dir / path).resolve()

    def get(self, ref: str) -> DepthRaster:
        return self._read(self.resolve(ref))


class PipelineService:
    def __init__(self, config: RunConfig):
        self.config = config
        self.timings: Dict[str, float] = {}
        self.written: List[Path] = []

    def _stage(self, name: str, started: float) -> None:
        self.timings[name] = round(time.perf_counter() - started, 3)

    def load_inputs(self) -> Tuple[SceneModel, Gallery, Dict[int, str]]:
        config = self.config
        scene = load_scene(config.scene_path)
        gallery = Gallery.from_file(config.gallery_path)
        overrides = load_overrides(config.overrides_path)
        clash = sorted(set(scene.labels) & set(gallery.participant_ids))
        if clash:
            raise ConfigError(f"static OOI labels collide with participant ids: {', '.join(clash)}")
        return scene, gallery, overrides

    def identify(
        self, frames: List[FrameRecord], gallery: Gallery, overrides: Dict[int, str]
    ) -> Tuple[List[ReIDTracklet], dict]:
        config = self.config
        tracker = TrackingService(TrackingParams(config.max_distance_px, config.max_gap_frames))
        tracklets = tracker.track(frames)
        reid = ReIDService(gallery, config.reid_threshold, config.reid_window, config.reid_strategy)
        return reid.resolve_all(tracklets, overrides)

    def _encode_chunk(
        self,
        gaze: GazeService,
        rasters: RasterCache,
        chunk: List[FrameRecord],
        identities: Dict[int, Dict[int, str]],
        owners: Dict[int, Dict[int, int]],
    ) -> List[FrameResult]:
        results = []
        for frame in chunk:
            raster: Optional[DepthRaster] = None
            if frame.depth_ref and not frame.has_inline_depth:
                try:
                    raster = rasters.get(frame.depth_ref)
                except RasterFormatError as e:
                    logger.warning(f"[PipelineService] frame {frame.frame_index}: {e}")
            results.append(gaze.encode_frame(
                frame,
                identities.get(frame.frame_index, {}),
                raster,
                owners.get(frame.frame_index, {}),
            ))
        return results

    async def encode(
        self,
        frames: List[FrameRecord],
        scene: SceneModel,
        resolved: List[ReIDTracklet],
    ) -> List[FrameResult]:
        identities: Dict[int, Dict[int, str]] = {}
        owners: Dict[int, Dict[int, int]] = {}
        for r in resolved:
            for d in r.tracklet.detections:
                owners.setdefault(d.frame_index, {})[d.index] = r.tracklet_id
                if r.identified:
                    identities.setdefault(d.frame_index, {})[d.index] = r.identity

        gaze = GazeService(scene, min_valid_fraction=self.config.min_valid_depth_fraction)
        rasters = RasterCache(Path(self.config.frames_path).parent)
        chunks = [frames[i:i + CHUNK_FRAMES] for i in range(0, len(frames), CHUNK_FRAMES)]

        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            futures = [
                loop.run_in_executor(pool, self._encode_chunk, gaze, rasters, chunk, identities, owners)
                for chunk in chunks
            ]
            # gather keeps submission order, which is frame order
            per_chunk = await asyncio.gather(*futures)
        return [result for chunk in per_chunk for result in chunk]

    async def _write(self, name: str, text: str) -> Path:
        path = Path(self.config.output_dir) / name
        self.written.append(path)
        async with aiofiles.open(path, "w", encoding="utf-8", newline="\n") as f:
            await f.write(text)
        return path

    def _remove_partial_outputs(self) -> None:
        for path in self.written:
            try:
                os.remove(path)
            except FileNotFoundError:
                pass
        self.written = []

    async def run(self) -> Dict:
        config = self.config
        config.validate_paths()
        session_id = str(uuid.uuid4())
        started = time.perf_counter()
        try:
            print("Step 1: Loading scene, gallery and frames...")
            t = time.perf_counter()
            scene, gallery, overrides = self.load_inputs()
            frames = list(parse_frames(config.frames_path))
            self._stage("load", t)
            print(f"Loaded {len(frames)} frames, {len(scene.static)} static OOIs, "
                  f"{len(gallery.participant_ids)} participants")

            print("Step 2: Tracking and re-identification...")
            t = time.perf_counter()
            resolved, reid_report = self.identify(frames, gallery, overrides)
            self._stage("identify", t)

            print(f"Step 3: Encoding gaze with {config.workers} worker(s)...")
            t = time.perf_counter()
            results = await self.encode(frames, scene, resolved)
            events: List[GazeEvent] = [e for r in results for e in r.events]
            frame_times = {f.frame_index: f.timestamp_s for f in frames}
            events = attribute_durations(events, frame_times, config.fps)
            self._stage("encode", t)
            print(f"Encoded {len(events)} gaze events")

            print("Step 4: Building timeline and attention network...")
            t = time.perf_counter()
            participants = sorted({r.identity for r in resolved if r.identified})
            timeline = []
            if frames:
                session_start = frames[0].timestamp_s
                session_end = frames[-1].timestamp_s + 1.0 / config.fps
                timeline = pool_timelines(
                    events, participants, config.interval_s, config.threshold_s,
                    session_start, session_end, pooling=config.pooling,
                )
            network = build_network(events)
            summary = {
                "participants": summarize_attention(events),
                "ranked_nodes": [{"id": n, "weight": round_float(w)} for n, w in network.ranked_nodes()],
            }
            self._stage("analytics", t)

            drops = [d for r in results for d in r.drops]
            low_depth = sum(1 for d in drops if d["reason"] == "insufficient_depth")
            if low_depth:
                logger.warning(f"[PipelineService] {low_depth} detections dropped for a low valid depth fraction")
            diagnostics = {
                "session": {
                    "frames": len(frames),
                    "detections": sum(len(f.detections) for f in frames),
                    "tracklets": len(resolved),
                    "identified_tracklets": sum(1 for r in resolved if r.identified),
                    "events": len(events),
                    "dropped": len(drops),
                },
                "drops": drops,
                "identity_conflicts": reid_report["identity_conflicts"],
                "overrides_applied": reid_report["overrides_applied"],
                "warnings": [w for r in results for w in r.warnings],
            }

            print("Step 5: Writing artifacts...")
            os.makedirs(config.output_dir, exist_ok=True)
            t = time.perf_counter()
            artifacts = {
                "gaze_events.jsonl": await self._write("gaze_events.jsonl", events_to_jsonl(events)),
                "timeline.csv": await self._write("timeline.csv", timeline_to_csv(timeline)),
                "network.dot": await self._write("network.dot", network_to_dot(network)),
                "network.json": await self._write("network.json", network_to_json(network)),
                "summary.json": await self._write("summary.json", dumps_stable(summary, indent=2) + "\n"),
            }
            self._stage("write", t)
            if config.record_timings:
                diagnostics["timings"] = dict(self.timings)
            artifacts["diagnostics.json"] = await self._write(
                "diagnostics.json", dumps_stable(diagnostics, indent=2) + "\n"
            )
        except Exception as e:
            self._remove_partial_outputs()
            logger.error(f"[PipelineService] session failed: {e}")
            raise

        elapsed = time.perf_counter() - started
        print(f"✅ Session complete in {format_duration(elapsed)}: {len(events)} events, "
              f"{len(drops)} dropped detections")
        return {
            "status": "success",
            "session_id": session_id,
            "output_dir": str(config.output_dir),
            "frames": len(frames),
            "events": len(events),
            "dropped": len(drops),
            "artifacts": {name: str(path) for name, path in artifacts.items()},
        }


async def run_session(config: RunConfig) -> Dict:
    return await PipelineService(config).run()


def validate_inputs(config: RunConfig) -> Dict:
    """Load and check every input without writing anything."""
    config.validate_paths()
    service = PipelineService(config)
    scene, gallery, overrides = service.load_inputs()
    rasters = RasterCache(Path(config.frames_path).parent)
    frames = 0
    detections = 0
    raster_refs = set()
    for frame in parse_frames(config.frames_path):
        frames += 1
        detections += len(frame.detections)
        if frame.depth_ref and not frame.has_inline_depth:
            raster_refs.add(frame.depth_ref)
    mismatched = []
    for ref in sorted(raster_refs):
        raster = rasters.get(ref)
        if not raster.matches(scene.intrinsics):
            mismatched.append(ref)
    if mismatched:
        raise RasterFormatError(
            f"{len(mismatched)} depth raster(s) do not match the camera resolution, first: {mismatched[0]}"
        )
    return {
        "static_oois": scene.labels,
        "triangles": scene.triangle_count,
        "participants": gallery.participant_ids,
        "overrides": len(overrides),
        "frames": frames,
        "detections": detections,
        "depth_rasters": len(raster_refs),
    }


