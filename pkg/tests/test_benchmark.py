import asyncio
import os
import time
from pathlib import Path

import pytest
import yaml

from src.services.pipeline_service import run_session, validate_inputs
from src.services.synthetic_service import generate_synthetic
from src.utils.config import load_run_config

CLASSROOM = Path(__file__).resolve().parent.parent / "scenarios" / "classroom.yaml"
MIN_FPS = float(os.getenv("GAZETRACE_MIN_FPS", "100"))

pytestmark = pytest.mark.benchmark


@pytest.fixture
def crowded_classroom():
    """Classroom with six participants and finely tessellated displays."""
    script = yaml.safe_load(CLASSROOM.read_text(encoding="utf-8"))
    script["duration_s"] = 10
    for static in script["static"]:
        static["quad"]["subdivisions"] = 112  # 2 x 112 x 112 x 2 = 50176 triangles
    for p in script["participants"]:
        p["waypoints"] = p["waypoints"][:1]
        p["gaze"] = [{"start": 0, "end": 10, "target": p["gaze"][0]["target"]}]
        p["hidden"] = []
    script["participants"] += [
        {"id": pid, "waypoints": [{"t": 0, "position": position}], "gaze": [{"start": 0, "end": 10, "target": target}]}
        for pid, position, target in [
            ("S3", [-1.4, 0.1, 3.6], "DISPLAY"),
            ("S4", [0.0, 0.15, 4.0], "TEACHER"),
            ("S5", [1.3, 0.1, 3.8], "WHITEBOARD"),
        ]
    ]
    return script


def test_session_throughput(tmp_path, crowded_classroom):
    session = generate_synthetic(crowded_classroom, tmp_path / "synth", seed=1)
    config = load_run_config(session.run_config_path, workers=os.cpu_count() or 1, record_timings=False)
    assert validate_inputs(config)["triangles"] >= 50_000

    started = time.perf_counter()
    result = asyncio.run(run_session(config))
    elapsed = time.perf_counter() - started

    fps = result["frames"] / elapsed
    print(f"{result['frames']} frames in {elapsed:.2f}s: {fps:.1f} frames/s with {config.workers} workers")
    assert result["frames"] == 300
    assert fps >= MIN_FPS
