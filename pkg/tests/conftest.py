import json
from pathlib import Path

import numpy as np
import pytest

from src.utils.geometry import CameraIntrinsics

QUAD_OBJ = """v -0.5 -0.5 0
v 0.5 -0.5 0
v 0.5 0.5 0
v -0.5 0.5 0
f 1 2 3 4
"""


@pytest.fixture
def intrinsics():
    # wide enough that (1960, 540) is still inside the image
    return CameraIntrinsics(fx=1000, fy=1000, cx=960, cy=540, width=2560, height=1440)


@pytest.fixture
def small_camera():
    return CameraIntrinsics(fx=500, fy=500, cx=320, cy=180, width=640, height=360)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_quad_scene(root: Path, camera: CameraIntrinsics, statics, floor_y: float = 1.2, **extra) -> Path:
    """statics: [(label, translation)], each a unit quad facing the camera"""
    (root / "quad.obj").write_text(QUAD_OBJ, encoding="utf-8")
    scene = {
        "intrinsics": camera.model_dump(),
        "floor_y": floor_y,
        "static": [
            {
                "label": label,
                "mesh": "quad.obj",
                "pose": {"rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1], "translation": list(translation)},
            }
            for label, translation in statics
        ],
        **extra,
    }
    path = root / "scene.json"
    path.write_text(json.dumps(scene), encoding="utf-8")
    return path


@pytest.fixture
def scene_path(tmp_path, small_camera):
    return write_quad_scene(tmp_path, small_camera, [("DISPLAY", (0.0, 0.0, 3.0))])


@pytest.fixture
def gallery_data():
    return {
        "dimension": 4,
        "threshold": 0.6,
        "participants": {
            "S1": [[1.0, 0.0, 0.0, 0.0]],
            "S2": [[0.0, 1.0, 0.0, 0.0], [0.0, 0.8, 0.6, 0.0]],
            "TEACHER": [[0.0, 0.0, 0.0, 1.0]],
        },
    }


@pytest.fixture
def gallery_path(tmp_path, gallery_data):
    path = tmp_path / "gallery.json"
    path.write_text(json.dumps(gallery_data), encoding="utf-8")
    return path


@pytest.fixture
def mini_script(small_camera):
    """Three participants, two displays, six seconds; S2 drops out for a second."""
    return {
        "duration_s": 6,
        "fps": 30,
        "camera": small_camera.model_dump(),
        "floor_y": 1.2,
        "embedding_dim": 16,
        "threshold": 0.6,
        "static": [
            {"label": "DISPLAY", "quad": {"center": [0.0, -0.5, 7.0], "size": [2.4, 1.4], "facing": "z"}},
            {"label": "WHITEBOARD", "quad": {"center": [-3.0, -0.4, 5.0], "size": [4.0, 1.5], "facing": "x"}},
        ],
        "participants": [
            {
                "id": "TEACHER",
                "waypoints": [{"t": 0, "position": [1.5, -0.35, 5.5]}, {"t": 6, "position": [2.0, -0.35, 5.5]}],
                "gaze": [{"start": 0, "end": 6, "target": "S1"}],
            },
            {
                "id": "S1",
                "waypoints": [{"t": 0, "position": [-0.6, 0.1, 3.0]}],
                "gaze": [
                    {"start": 0, "end": 3, "target": "DISPLAY"},
                    {"start": 3, "end": 6, "target": "TEACHER"},
                ],
            },
            {
                "id": "S2",
                "waypoints": [{"t": 0, "position": [0.6, 0.1, 3.2]}],
                "gaze": [
                    {"start": 0, "end": 5, "target": "WHITEBOARD"},
                    {"start": 5, "end": 6, "direction": [0.0, -1.0, 0.0]},
                ],
                "hidden": [{"start": 2.0, "end": 3.0}],
            },
        ],
    }


@pytest.fixture
def make_quad_scene():
    return write_quad_scene
