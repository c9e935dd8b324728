"""
Closest-hit ray queries against a frame's scene.

A bounding volume hierarchy over the static objects is built once per
session and reused; the few participant boxes of each frame get their own
small hierarchy. Both levels share one triangle test, so a BVH query and a
brute-force scan over the same triangles agree exactly.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.services.scene_service import FrameScene, SceneMesh, SceneModel
from src.utils.geometry import Ray

logger = logging.getLogger(__name__)

MIN_T = 1e-6
PARALLEL_EPS = 1e-12
TIE_TOLERANCE = 1e-9
LEAF_SIZE = 4


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    ooi_label: str
    mesh_id: int
    triangle_index: int


@dataclass(frozen=True)
class TriangleTable:
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    mesh_id: np.ndarray
    triangle_index: np.ndarray
    labels: Dict[int, str]

    def __len__(self) -> int:
        return len(self.mesh_id)

    def take(self, order: np.ndarray) -> "TriangleTable":
        return TriangleTable(
            self.v0[order], self.e1[order], self.e2[order],
            self.mesh_id[order], self.triangle_index[order], self.labels,
        )


def triangle_table(meshes: Iterable[SceneMesh]) -> TriangleTable:
    v0, e1, e2, mesh_ids, tri_ids = [], [], [], [], []
    labels: Dict[int, str] = {}
    for m in meshes:
        corners = m.mesh.corners
        v0.append(corners[:, 0])
        e1.append(corners[:, 1] - corners[:, 0])
        e2.append(corners[:, 2] - corners[:, 0])
        mesh_ids.append(np.full(len(corners), m.mesh_id, dtype=np.int64))
        tri_ids.append(np.arange(len(corners), dtype=np.int64))
        labels[m.mesh_id] = m.label
    if not mesh_ids:
        empty = np.zeros((0, 3))
        return TriangleTable(empty, empty, empty, np.zeros(0, np.int64), np.zeros(0, np.int64), labels)
    return TriangleTable(
        np.concatenate(v0), np.concatenate(e1), np.concatenate(e2),
        np.concatenate(mesh_ids), np.concatenate(tri_ids), labels,
    )


def _intersect_batch(
    origin: np.ndarray, direction: np.ndarray, v0: np.ndarray, e1: np.ndarray, e2: np.ndarray
) -> np.ndarray:
    """
    Moller-Trumbore over many triangles; np.inf where there is no hit.

    Cross and dot products are spelled out per component so each triangle's
    result does not depend on how many triangles share the call.
    """
    dx, dy, dz = direction
    # pvec = direction x e2
    px = dy * e2[:, 2] - dz * e2[:, 1]
    py = dz * e2[:, 0] - dx * e2[:, 2]
    pz = dx * e2[:, 1] - dy * e2[:, 0]
    det = e1[:, 0] * px + e1[:, 1] * py + e1[:, 2] * pz
    valid = np.abs(det) >= PARALLEL_EPS
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=valid)

    tx = origin[0] - v0[:, 0]
    ty = origin[1] - v0[:, 1]
    tz = origin[2] - v0[:, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    # qvec = tvec x e1
    qx = ty * e1[:, 2] - tz * e1[:, 1]
    qy = tz * e1[:, 0] - tx * e1[:, 2]
    qz = tx * e1[:, 1] - ty * e1[:, 0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    t = (e2[:, 0] * qx + e2[:, 1] * qy + e2[:, 2] * qz) * inv

    hit = valid & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MIN_T)
    return np.where(hit, t, np.inf)


def intersect_ray_triangle(ray: Ray, v0, v1, v2) -> Optional[float]:
    v0 = np.asarray(v0, dtype=np.float64).reshape(1, 3)
    v1 = np.asarray(v1, dtype=np.float64).reshape(1, 3)
    v2 = np.asarray(v2, dtype=np.float64).reshape(1, 3)
    t = _intersect_batch(ray.origin, ray.direction, v0, v1 - v0, v2 - v0)[0]
    return None if math.isinf(t) else float(t)


class _Candidates:
    """Hits within TIE_TOLERANCE of the best t seen so far."""

    def __init__(self):
        self.best_t = math.inf
        self.hits: List[Tuple[float, int, int, str]] = []

    def add(self, table: TriangleTable, rows: np.ndarray, t: np.ndarray) -> None:
        finite = np.isfinite(t)
        if not finite.any():
            return
        t_min = float(t[finite].min())
        if t_min < self.best_t:
            self.best_t = t_min
        keep = np.flatnonzero(t <= self.best_t + TIE_TOLERANCE)
        for i in keep:
            row = rows[i]
            mesh_id = int(table.mesh_id[row])
            self.hits.append((float(t[i]), mesh_id, int(table.triangle_index[row]), table.labels[mesh_id]))

    def best(self, ray: Ray) -> Optional[Hit]:
        if not self.hits:
            return None
        cutoff = self.best_t + TIE_TOLERANCE
        t, mesh_id, tri, label = min(
            (h for h in self.hits if h[0] <= cutoff), key=lambda h: (h[1], h[2])
        )
        return Hit(t=t, point=ray.at(t), ooi_label=label, mesh_id=mesh_id, triangle_index=tri)


def _exclusion_mask(mesh_ids: np.ndarray, exclude: FrozenSet[int]) -> Optional[np.ndarray]:
    if not exclude:
        return None
    return ~np.isin(mesh_ids, np.fromiter(exclude, dtype=np.int64))


class BVH:
    """
    Binary tree of axis-aligned boxes over a triangle table.

    Nodes are stored flat; a leaf owns triangles [start, start + count) of
    the reordered table and holds at most LEAF_SIZE of them.
    """

    def __init__(self, table: TriangleTable, leaf_size: int = LEAF_SIZE):
        self.leaf_size = leaf_size
        n = len(table)
        self.bounds: List[Tuple[float, float, float, float, float, float]] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.start: List[int] = []
        self.count: List[int] = []
        if n == 0:
            self.table = table
            return

        v1 = table.v0 + table.e1
        v2 = table.v0 + table.e2
        tri_lo = np.minimum(np.minimum(table.v0, v1), v2)
        tri_hi = np.maximum(np.maximum(table.v0, v1), v2)
        centroids = (table.v0 + v1 + v2) / 3.0
        order = np.arange(n)

        # (node index, start, end) ranges into `order`
        self._new_node()
        stack = [(0, 0, n)]
        while stack:
            node, s, e = stack.pop()
            idx = order[s:e]
            lo = tri_lo[idx].min(axis=0)
            hi = tri_hi[idx].max(axis=0)
            pad = 1e-9 + 1e-12 * np.maximum(np.abs(lo), np.abs(hi))
            self.bounds[node] = tuple((lo - pad).tolist() + (hi + pad).tolist())
            if e - s <= leaf_size:
                self.start[node] = s
                self.count[node] = e - s
                continue
            c = centroids[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (e - s) // 2
            # stable median split: ties keep their table order
            part = np.argsort(c[:, axis], kind="stable")
            order[s:e] = idx[part]
            left = self._new_node()
            right = self._new_node()
            self.left[node] = left
            self.right[node] = right
            stack.append((right, s + mid, e))
            stack.append((left, s, s + mid))

        self.table = table.take(order)

    def _new_node(self) -> int:
        self.bounds.append((0.0,) * 6)
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(0)
        self.count.append(0)
        return len(self.bounds) - 1

    def __len__(self) -> int:
        return len(self.table)

    @property
    def node_count(self) -> int:
        return len(self.bounds)

    def leaves(self) -> List[int]:
        return [i for i in range(self.node_count) if self.left[i] < 0] if len(self) else []

    def _entry(self, node: int, o: Tuple[float, float, float], inv: Tuple[float, float, float]) -> float:
        """Ray parameter where the ray enters the node's box, or inf on a miss."""
        b = self.bounds[node]
        t_near = 0.0
        t_far = math.inf
        for axis in range(3):
            lo = b[axis]
            hi = b[axis + 3]
            if inv[axis] is None:
                if o[axis] < lo or o[axis] > hi:
                    return math.inf
                continue
            t1 = (lo - o[axis]) * inv[axis]
            t2 = (hi - o[axis]) * inv[axis]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > t_near:
                t_near = t1
            if t2 < t_far:
                t_far = t2
            if t_near > t_far:
                return math.inf
        return t_near

    def collect(self, ray: Ray, exclude: FrozenSet[int], found: _Candidates) -> None:
        if not len(self):
            return
        o = tuple(float(x) for x in ray.origin)
        inv = tuple(None if d == 0.0 else 1.0 / float(d) for d in ray.direction)
        root_entry = self._entry(0, o, inv)
        if math.isinf(root_entry):
            return
        stack = [(root_entry, 0)]
        table = self.table
        while stack:
            entry, node = stack.pop()
            if entry > found.best_t + TIE_TOLERANCE:
                continue
            left = self.left[node]
            if left < 0:
                s = self.start[node]
                e = s + self.count[node]
                rows = np.arange(s, e)
                t = _intersect_batch(ray.origin, ray.direction, table.v0[s:e], table.e1[s:e], table.e2[s:e])
                mask = _exclusion_mask(table.mesh_id[s:e], exclude)
                if mask is not None:
                    t = np.where(mask, t, np.inf)
                found.add(table, rows, t)
                continue
            right = self.right[node]
            el = self._entry(left, o, inv)
            er = self._entry(right, o, inv)
            # nearer child is popped first
            if el <= er:
                if not math.isinf(er):
                    stack.append((er, right))
                if not math.isinf(el):
                    stack.append((el, left))
            else:
                if not math.isinf(el):
                    stack.append((el, left))
                if not math.isinf(er):
                    stack.append((er, right))


@dataclass(frozen=True)
class SceneIndex:
    """Two-level index: session-wide static BVH plus a per-frame dynamic one."""
    static: BVH
    dynamic: BVH

    @property
    def levels(self) -> Tuple[BVH, BVH]:
        return (self.static, self.dynamic)


def build_bvh_from_meshes(meshes: Sequence[SceneMesh], leaf_size: int = LEAF_SIZE) -> BVH:
    return BVH(triangle_table(meshes), leaf_size=leaf_size)


def build_bvh(scene: FrameScene) -> BVH:
    """Single BVH over every static and dynamic triangle of a frame."""
    return build_bvh_from_meshes(scene.static_meshes() + scene.dynamic_meshes())


def build_static_bvh(scene: Union[SceneModel, FrameScene]) -> BVH:
    meshes = [SceneMesh(i, s.label, s.mesh) for i, s in enumerate(scene.static)]
    bvh = build_bvh_from_meshes(meshes)
    logger.info(f"[RaycastService] static BVH: {len(bvh)} triangles, {bvh.node_count} nodes")
    return bvh


def build_scene_index(scene: FrameScene, static_bvh: Optional[BVH] = None) -> SceneIndex:
    if static_bvh is None:
        static_bvh = build_static_bvh(scene)
    return SceneIndex(static=static_bvh, dynamic=build_bvh_from_meshes(scene.dynamic_meshes()))


def closest_hit(
    ray: Ray, bvh: Union[BVH, SceneIndex], exclude: Iterable[int] = frozenset()
) -> Optional[Hit]:
    """
    Nearest intersection among non-excluded meshes.

    Hits within TIE_TOLERANCE of the nearest one are ranked by mesh id,
    then triangle index.
    """
    exclude = frozenset(exclude)
    levels = bvh.levels if isinstance(bvh, SceneIndex) else (bvh,)
    found = _Candidates()
    for level in levels:
        level.collect(ray, exclude, found)
    return found.best(ray)


def closest_hit_brute_force(
    ray: Ray, meshes: Sequence[SceneMesh], exclude: Iterable[int] = frozenset()
) -> Optional[Hit]:
    """Scan every triangle; reference answer for closest_hit."""
    table = triangle_table(meshes)
    found = _Candidates()
    if len(table):
        t = _intersect_batch(ray.origin, ray.direction, table.v0, table.e1, table.e2)
        mask = _exclusion_mask(table.mesh_id, frozenset(exclude))
        if mask is not None:
            t = np.where(mask, t, np.inf)
        found.add(table, np.arange(len(table)), t)
    return found.best(ray)
