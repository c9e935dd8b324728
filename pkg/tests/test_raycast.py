import numpy as np
import pytest

from src.models.records import Detection
from src.services.raycast_service import (
    BVH,
    LEAF_SIZE,
    MIN_T,
    _intersect_batch,
    build_bvh,
    build_bvh_from_meshes,
    build_scene_index,
    build_static_bvh,
    closest_hit,
    closest_hit_brute_force,
    intersect_ray_triangle,
    triangle_table,
)
from src.services.scene_service import (
    FrameScene,
    SceneMesh,
    StaticOOI,
    TriangleMesh,
    assemble_frame_scene,
    build_dynamic_ooi,
)
from src.utils.geometry import Ray

TRIANGLE = ((-1, -1, 2), (1, -1, 2), (0, 1, 2))


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def quad(z, half=1.0):
    vertices = np.array([(-half, -half, z), (half, -half, z), (half, half, z), (-half, half, z)])
    return TriangleMesh(vertices, np.array([(0, 1, 2), (0, 2, 3)]), f"quad@{z}")


def random_meshes(rng, n_meshes, per_mesh, spread=4.0, size=0.6):
    meshes = []
    for mesh_id in range(n_meshes):
        centers = rng.uniform((-spread, -spread, 1.0), (spread, spread, 1.0 + 2 * spread), size=(per_mesh, 1, 3))
        corners = centers + rng.normal(0, size, size=(per_mesh, 3, 3))
        mesh = TriangleMesh(corners.reshape(-1, 3), np.arange(3 * per_mesh).reshape(-1, 3))
        meshes.append(SceneMesh(mesh_id, f"M{mesh_id}", mesh))
    return meshes


def random_ray(rng, spread=4.0):
    origin = rng.uniform(-1.0, 1.0, size=3)
    aim = rng.uniform((-spread, -spread, 1.0), (spread, spread, 1.0 + 2 * spread))
    return Ray(origin, unit(aim - origin))


def test_axis_aligned_hit():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
    t = intersect_ray_triangle(ray, *TRIANGLE)
    assert t == pytest.approx(2.0)
    np.testing.assert_allclose(ray.at(t), (0, 0, 2))


def test_triangle_behind_origin_missed():
    assert intersect_ray_triangle(Ray(np.zeros(3), np.array([0.0, 0.0, -1.0])), *TRIANGLE) is None


def test_parallel_and_self_hits_missed():
    assert intersect_ray_triangle(Ray(np.zeros(3), np.array([1.0, 0.0, 0.0])), *TRIANGLE) is None
    # origin on the triangle itself
    assert intersect_ray_triangle(Ray(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, 1.0])), *TRIANGLE) is None


def plane_oracle(origin, direction, v0, v1, v2):
    """Plane intersection followed by a barycentric solve; (t, u, v, conditioning)."""
    e1, e2 = v1 - v0, v2 - v0
    n = np.cross(e1, e2)
    denom = n @ direction
    t = n @ (v0 - origin) / denom
    w = origin + t * direction - v0
    d00, d01, d11 = e1 @ e1, e1 @ e2, e2 @ e2
    d20, d21 = w @ e1, w @ e2
    den = d00 * d11 - d01 * d01
    u = (d11 * d20 - d01 * d21) / den
    v = (d00 * d21 - d01 * d20) / den
    return t, u, v, abs(denom) / np.linalg.norm(n)


def test_agrees_with_plane_barycentric_oracle(rng):
    checked = hits = 0
    for _ in range(100):
        ray = random_ray(rng)
        corners = rng.uniform(-5, 5, size=(1000, 3, 3)) + (0.0, 0.0, 5.0)
        t_mt = _intersect_batch(ray.origin, ray.direction, corners[:, 0],
                                corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        for (v0, v1, v2), t in zip(corners, t_mt):
            t_ref, u, v, conditioning = plane_oracle(ray.origin, ray.direction, v0, v1, v2)
            margin = min(abs(u), abs(v), abs(1 - u - v))
            if conditioning < 1e-3 or margin < 1e-7 or abs(t_ref - MIN_T) < 1e-6:
                continue
            checked += 1
            inside = u >= 0 and v >= 0 and u + v <= 1 and t_ref > MIN_T
            assert np.isfinite(t) == inside
            if inside:
                hits += 1
                assert t == pytest.approx(t_ref, abs=1e-9)
    assert checked > 90_000
    assert hits > 1_000


def test_single_triangle_single_leaf():
    bvh = build_bvh_from_meshes([SceneMesh(0, "T", TriangleMesh(np.array(TRIANGLE), np.array([(0, 1, 2)])))])
    assert bvh.node_count == 1
    assert bvh.leaves() == [0]


def test_leaves_partition_triangles(rng):
    meshes = random_meshes(rng, 7, 113)
    bvh = build_bvh_from_meshes(meshes)
    leaves = bvh.leaves()
    assert sum(bvh.count[i] for i in leaves) == 7 * 113
    assert all(0 < bvh.count[i] <= LEAF_SIZE for i in leaves)
    covered = sorted(r for i in leaves for r in range(bvh.start[i], bvh.start[i] + bvh.count[i]))
    assert covered == list(range(7 * 113))
    owned = sorted(zip(bvh.table.mesh_id.tolist(), bvh.table.triangle_index.tolist()))
    assert owned == [(m, t) for m in range(7) for t in range(113)]


def test_empty_bvh_misses():
    bvh = BVH(triangle_table([]))
    assert len(bvh) == 0
    assert bvh.leaves() == []
    assert closest_hit(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0])), bvh) is None

    empty = FrameScene(frame_index=0, static=(), dynamic=(), floor_y=1.2)
    assert closest_hit(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0])), build_bvh(empty)) is None


def test_parallel_quads_and_exclusion():
    meshes = [SceneMesh(0, "NEAR", quad(2.0)), SceneMesh(1, "FAR", quad(3.0))]
    bvh = build_bvh_from_meshes(meshes)
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))

    hit = closest_hit(ray, bvh)
    assert hit.t == pytest.approx(2.0)
    assert hit.ooi_label == "NEAR"
    # the ray runs down the shared diagonal: lowest triangle index wins
    assert hit.triangle_index == 0

    hit = closest_hit(ray, bvh, exclude={0})
    assert hit.t == pytest.approx(3.0)
    assert hit.ooi_label == "FAR"
    assert closest_hit(ray, bvh, exclude={0, 1}) is None


def assert_same_hit(a, b):
    assert (a is None) == (b is None)
    if a is not None:
        assert (a.mesh_id, a.triangle_index) == (b.mesh_id, b.triangle_index)
        assert a.t == pytest.approx(b.t, abs=1e-9)


def test_bvh_matches_brute_force(rng):
    meshes = random_meshes(rng, 50, 200)
    bvh = build_bvh_from_meshes(meshes)
    hits = 0
    for _ in range(2000):
        ray = random_ray(rng)
        expected = closest_hit_brute_force(ray, meshes)
        assert_same_hit(closest_hit(ray, bvh), expected)
        hits += expected is not None
    assert hits > 500


@pytest.mark.slow
def test_bvh_matches_brute_force_at_scale(rng):
    meshes = random_meshes(rng, 100, 1000, size=0.15)
    bvh = build_bvh_from_meshes(meshes)
    assert len(bvh) == 100_000
    hits = 0
    for _ in range(300):
        ray = random_ray(rng)
        exclude = {int(m) for m in rng.choice(100, size=int(rng.integers(0, 5)), replace=False)}
        expected = closest_hit_brute_force(ray, meshes, exclude)
        assert_same_hit(closest_hit(ray, bvh, exclude), expected)
        hits += expected is not None
    assert hits > 150


def test_bvh_matches_brute_force_with_exclusion(rng):
    for _ in range(20):
        meshes = random_meshes(rng, int(rng.integers(2, 12)), int(rng.integers(1, 40)))
        bvh = build_bvh_from_meshes(meshes, leaf_size=int(rng.integers(1, 6)))
        for _ in range(50):
            ray = random_ray(rng)
            exclude = {int(m) for m in rng.choice(len(meshes), size=int(rng.integers(0, len(meshes))), replace=False)}
            assert_same_hit(closest_hit(ray, bvh, exclude), closest_hit_brute_force(ray, meshes, exclude))


def test_two_level_index_matches_single_bvh(intrinsics, rng):
    static = tuple(StaticOOI(f"Q{i}", quad(2.0 + i, half=0.4 + 0.3 * i)) for i in range(3))
    dynamics = [
        build_dynamic_ooi(Detection(frame_index=3, bbox=(x - 40, 500, x + 40, 580)), pid, 2.5, intrinsics, 1.2)
        for x, pid in [(700, "S1"), (1200, "S2")]
    ]
    frame = assemble_frame_scene(static, dynamics, 1.2)
    index = build_scene_index(frame, build_static_bvh(frame))
    single = build_bvh(frame)
    for _ in range(500):
        ray = Ray(rng.uniform(-0.5, 0.5, size=3), unit(rng.normal(size=3) + (0.0, 0.0, 1.5)))
        exclude = set(frame.mesh_ids_for("S1")) if rng.random() < 0.5 else set()
        assert_same_hit(closest_hit(ray, index, exclude), closest_hit(ray, single, exclude))
