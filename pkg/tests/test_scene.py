import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.models.records import Detection
from src.services.scene_service import (
    FLOOR_LABEL,
    Box,
    DynamicOOI,
    SceneConfig,
    assemble_frame_scene,
    box_to_mesh,
    build_dynamic_ooi,
    build_scene,
    load_scene,
)
from src.utils.errors import ConfigError, SceneConflictError


def face(frame, cx, cy, w, h=None):
    h = w if h is None else h
    return Detection(frame_index=frame, bbox=(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))


def test_load_scene_unit_quad(tmp_path, small_camera, make_quad_scene):
    scene = load_scene(make_quad_scene(tmp_path, small_camera, [("DISPLAY", (0.0, 0.0, 3.0))]))
    [display] = scene.static
    assert display.label == "DISPLAY"
    assert len(display.mesh.triangles) == 2
    assert_allclose(display.mesh.vertices[:, 2], 3.0)
    assert scene.intrinsics == small_camera
    assert scene.floor_y == 1.2


def test_load_scene_duplicate_label(tmp_path, small_camera, make_quad_scene):
    path = make_quad_scene(tmp_path, small_camera, [("DISPLAY", (0, 0, 3)), ("DISPLAY", (0, 0, 4))])
    with pytest.raises(ConfigError, match="DISPLAY"):
        load_scene(path)


def test_load_scene_errors(tmp_path, small_camera, make_quad_scene):
    with pytest.raises(ConfigError):
        load_scene(tmp_path / "nope.json")

    path = make_quad_scene(tmp_path, small_camera, [("NONE", (0, 0, 3))])
    with pytest.raises(ConfigError, match="reserved"):
        load_scene(path)

    doc = json.loads(path.read_text())
    doc["static"] = [{"label": "WALL", "mesh": "missing.obj"}]
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="WALL"):
        load_scene(path)

    doc["static"] = [{"label": "WALL", "mesh": "quad.obj", "pose": {"rotation": [2, 0, 0, 0, 1, 0, 0, 0, 1]}}]
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="pose"):
        load_scene(path)


def test_degenerate_triangle_rejected(tmp_path, small_camera, make_quad_scene):
    path = make_quad_scene(tmp_path, small_camera, [("WALL", (0, 0, 3))])
    (tmp_path / "quad.obj").write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(ConfigError, match="degenerate"):
        load_scene(path)


def test_triangle_count_over_files(tmp_path, small_camera):
    statics = []
    total = 0
    for i, n in enumerate([1, 2, 3, 4, 5]):
        lines = [f"v {x} {y} 0" for y in range(n + 1) for x in range(2)]
        faces = [f"f {2 * j + 1} {2 * j + 2} {2 * j + 4} {2 * j + 3}" for j in range(n)]
        (tmp_path / f"m{i}.obj").write_text("\n".join(lines + faces) + "\n")
        statics.append({"label": f"M{i}", "mesh": f"m{i}.obj", "pose": {"translation": [0, 0, 2 + i]}})
        total += 2 * n
    config = SceneConfig(intrinsics=small_camera, floor_y=1.2, static=statics)
    assert build_scene(config, base_dir=tmp_path).triangle_count == total


def test_auto_floor(tmp_path, small_camera, make_quad_scene):
    path = make_quad_scene(tmp_path, small_camera, [("DISPLAY", (0, 0, 3))], floor={"half_extent": 5.0})
    scene = load_scene(path)
    assert scene.labels == ["DISPLAY", FLOOR_LABEL]
    assert_allclose(scene.static[1].mesh.vertices[:, 1], 1.2)


@pytest.mark.parametrize("extents,area", [((1, 1, 1), 6.0), ((2, 1, 1), 10.0)])
def test_box_to_mesh_area(extents, area):
    mesh = box_to_mesh(Box(np.zeros(3), np.array(extents, dtype=float)))
    assert len(mesh.vertices) == 8
    assert len(mesh.triangles) == 12
    assert mesh.area == pytest.approx(area, abs=1e-12)


def test_box_mesh_area_closed_form_and_outward(rng):
    for _ in range(200):
        center = rng.normal(size=3)
        w, h, d = rng.uniform(0.05, 3.0, size=3)
        mesh = box_to_mesh(Box(center, np.array([w, h, d])))
        assert mesh.area == pytest.approx(2 * (w * h + w * d + h * d), abs=1e-9)
        c = mesh.corners
        normals = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        outward = c.mean(axis=1) - center
        assert np.all(np.einsum("ij,ij->i", normals, outward) > 0)


def test_face_width_from_pixels(intrinsics):
    ooi = build_dynamic_ooi(face(0, 960, 540, 100), "S1", 2.0, intrinsics, floor_y=1.2)
    assert_allclose(ooi.face_box.center, (0.0, 0.0, 2.0), atol=1e-12)
    assert ooi.face_box.extents[0] == pytest.approx(0.2)
    assert not ooi.clamped_to_floor


def test_body_hangs_to_floor(intrinsics):
    # face centre at y = -0.3 with depth 2: pixel y = 540 + 1000 * -0.3 / 2
    ooi = build_dynamic_ooi(face(0, 960, 390, 100), "S1", 2.0, intrinsics, floor_y=1.2)
    half = ooi.face_box.extents[1] / 2
    assert ooi.face_box.center[1] == pytest.approx(-0.3)
    assert ooi.body_box.min[1] == pytest.approx(-0.3 - half)
    assert ooi.body_box.max[1] == pytest.approx(1.2, abs=1e-6)


def test_face_below_floor_is_clamped(intrinsics, caplog):
    ooi = build_dynamic_ooi(face(0, 960, 1400, 100), "S1", 2.0, intrinsics, floor_y=1.2)
    assert ooi.clamped_to_floor
    assert ooi.face_box.max[1] == pytest.approx(1.2)
    assert "below the floor" in caplog.text


def test_depth_scales_face_linearly(intrinsics):
    near = build_dynamic_ooi(face(0, 900, 500, 80, 100), "S1", 1.5, intrinsics, floor_y=5.0)
    far = build_dynamic_ooi(face(0, 900, 500, 80, 100), "S1", 3.0, intrinsics, floor_y=5.0)
    assert_allclose(far.face_box.extents, 2 * near.face_box.extents, rtol=1e-12)


def test_body_contains_face_footprint(intrinsics, rng):
    for _ in range(1000):
        w = rng.uniform(10, 400)
        det = face(0, rng.uniform(300, 2200), rng.uniform(200, 1200), w, w * rng.uniform(0.8, 1.5))
        ooi = build_dynamic_ooi(det, "S1", rng.uniform(0.5, 10), intrinsics, floor_y=3.0)
        for axis in (0, 2):
            assert ooi.body_box.min[axis] <= ooi.face_box.min[axis] + 1e-12
            assert ooi.body_box.max[axis] >= ooi.face_box.max[axis] - 1e-12
        assert ooi.body_box.max[1] == pytest.approx(3.0, abs=1e-6)


def test_assemble_frame_scene(tmp_path, small_camera, make_quad_scene, intrinsics):
    scene = load_scene(make_quad_scene(tmp_path, small_camera, [("DISPLAY", (0, 0, 3))]))
    empty = assemble_frame_scene(scene.static, [], scene.floor_y)
    assert empty.dynamic == ()
    assert empty.static is scene.static

    dynamics = [build_dynamic_ooi(face(7, 600 + 300 * i, 500, 60), pid, 3.0, intrinsics, 1.2)
                for i, pid in enumerate(["S1", "S2", "TEACHER"])]
    frame = assemble_frame_scene(scene.static, dynamics, scene.floor_y)
    assert frame.frame_index == 7
    meshes = frame.dynamic_meshes()
    assert len(meshes) == 6
    assert [m.mesh_id for m in meshes] == [1, 2, 3, 4, 5, 6]
    assert frame.mesh_ids_for("S2") == (3, 4)
    assert frame.static is scene.static

    with pytest.raises(SceneConflictError):
        assemble_frame_scene(scene.static, [dynamics[0], dynamics[0]], scene.floor_y)
    other = DynamicOOI("S2", dynamics[1].face_box, dynamics[1].body_box, frame_index=8)
    with pytest.raises(SceneConflictError):
        assemble_frame_scene(scene.static, [dynamics[0], other], scene.floor_y)
