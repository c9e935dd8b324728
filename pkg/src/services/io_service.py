"""
External formats: frame streams (JSON Lines), depth rasters, gaze event files
"""
import json
import logging
from pathlib import Path
from typing import Generator, Iterable, Iterator, List, Union

import numpy as np
from pydantic import ValidationError

from src.models.records import FrameRecord, GazeEvent
from src.services.gaze_service import DepthRaster
from src.utils.errors import DataError, FrameParseError, RasterFormatError, StreamOrderError
from src.utils.format_utils import dumps_stable, round_float, round_vector

logger = logging.getLogger(__name__)

RASTER_MAGIC = b"DRASTER"
MAX_HEADER_BYTES = 64


def stream_lines(file_path: Union[str, Path]) -> Generator[str, None, None]:
    """Decoded lines of a UTF-8 file; a line that does not decode is a FrameParseError."""
    with open(file_path, "rb") as f:
        for line_number, raw in enumerate(f, start=1):
            try:
                yield raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise FrameParseError(f"invalid UTF-8 at byte {e.start}", line_number) from e


def parse_frames(path: Union[str, Path]) -> Iterator[FrameRecord]:
    """
    Stream FrameRecords from a JSON Lines file, one record per line.

    Blank lines are skipped; frame_index must strictly increase and
    timestamps must not go backwards.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"frames file not found: {path}")
    last_index = None
    last_time = None
    for line_number, line in enumerate(stream_lines(path), start=1):
        if not line.strip():
            continue
        try:
            record = FrameRecord(**json.loads(line))
        except json.JSONDecodeError as e:
            raise FrameParseError(f"malformed JSON: {e.msg}", line_number) from e
        except (ValidationError, TypeError) as e:
            raise FrameParseError(f"invalid frame record: {e}", line_number) from e
        if last_index is not None and record.frame_index <= last_index:
            raise StreamOrderError(
                f"frame_index {record.frame_index} does not follow {last_index}", line_number
            )
        if last_time is not None and record.timestamp_s < last_time:
            raise StreamOrderError(
                f"timestamp {record.timestamp_s} goes back from {last_time}", line_number
            )
        last_index = record.frame_index
        last_time = record.timestamp_s
        yield record


def frame_to_json(frame: FrameRecord) -> str:
    doc = frame.model_dump(exclude_none=True, mode="json")
    for det in doc.get("detections", []):
        det.pop("frame_index", None)
        det.pop("index", None)
    return dumps_stable(doc)


def write_frames(path: Union[str, Path], frames: Iterable[FrameRecord]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for frame in frames:
            f.write(frame_to_json(frame) + "\n")
            count += 1
    return count


def read_depth_raster(path: Union[str, Path]) -> DepthRaster:
    """
    "DRASTER <width> <height>\\n" followed by width*height little-endian
    float32 depths, row-major, meters; NaN marks an invalid pixel.
    """
    path = Path(path)
    if not path.is_file():
        raise RasterFormatError(f"depth raster not found: {path}")
    data = path.read_bytes()
    newline = data.find(b"\n", 0, MAX_HEADER_BYTES)
    if newline < 0:
        raise RasterFormatError(f"{path}: missing raster header")
    parts = data[:newline].split()
    if len(parts) != 3 or parts[0] != RASTER_MAGIC:
        raise RasterFormatError(f"{path}: bad raster header {data[:newline]!r}")
    try:
        width, height = int(parts[1]), int(parts[2])
    except ValueError as e:
        raise RasterFormatError(f"{path}: bad raster dimensions {data[:newline]!r}") from e
    if width <= 0 or height <= 0:
        raise RasterFormatError(f"{path}: raster dimensions must be positive")
    payload = data[newline + 1:]
    expected = width * height * 4
    if len(payload) < expected:
        raise RasterFormatError(
            f"{path}: truncated payload, {len(payload) // 4} of {width * height} values"
        )
    if len(payload) > expected:
        raise RasterFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    raster = DepthRaster(width, height, values)
    logger.debug(f"[IOService] {path.name}: {width}x{height}, {raster.valid_fraction:.0%} valid")
    return raster


def write_depth_raster(path: Union[str, Path], raster: DepthRaster) -> None:
    header = f"DRASTER {raster.width} {raster.height}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(raster.values, dtype="<f4").tobytes())


def event_to_dict(e: GazeEvent) -> dict:
    return {
        "frame_index": e.frame_index,
        "timestamp": round_float(e.timestamp),
        "observer": e.observer,
        "target": e.target,
        "hit_point": round_vector(e.hit_point),
        "t_min": round_float(e.t_min),
        "hit_pixel": round_vector(e.hit_pixel),
        "duration_s": round_float(e.duration_s),
    }


def events_to_jsonl(events: Iterable[GazeEvent]) -> str:
    return "".join(dumps_stable(event_to_dict(e)) + "\n" for e in events)


def read_events(path: Union[str, Path]) -> List[GazeEvent]:
    if not Path(path).is_file():
        raise DataError(f"gaze event file not found: {path}")
    events = []
    for line_number, line in enumerate(stream_lines(path), start=1):
        if not line.strip():
            continue
        try:
            events.append(GazeEvent(**json.loads(line)))
        except (json.JSONDecodeError, ValidationError, TypeError) as e:
            raise FrameParseError(f"invalid gaze event: {e}", line_number) from e
    return events
