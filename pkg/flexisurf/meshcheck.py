"""
Topological and geometric checks on triangle meshes.

Orientation predicates run in floating point first and are recomputed with
exact rationals whenever the result is within the rounding error bound of
zero, so intersection answers do not depend on rounding.
"""
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .extract import TriMesh
from .geometry import as_trimesh

EPSILON = np.finfo(float).eps / 2
O3D_ERRBOUND = (7.0 + 56.0 * EPSILON) * EPSILON
HULL_TOLERANCE = 1e-9

MeshLike = Union[TriMesh, Tuple[np.ndarray, np.ndarray]]


@dataclass
class TopoReport:
    num_vertices: int
    num_edges: int
    num_faces: int
    boundary_edges: int
    nonmanifold_edges: int
    nonmanifold_vertices: int
    components: int
    euler: int
    self_intersections: int

    @property
    def is_manifold(self) -> bool:
        return self.nonmanifold_edges == 0 and self.nonmanifold_vertices == 0

    @property
    def is_watertight(self) -> bool:
        return self.boundary_edges == 0 and self.is_manifold

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _as_arrays(mesh: MeshLike) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(mesh, TriMesh):
        return mesh.numpy()
    vertices, faces = mesh
    return np.asarray(vertices, dtype=float).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def edge_table(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique undirected edges, the number of faces on each, and the edge of every face side"""
    sides = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    edges, inverse, counts = np.unique(sides, axis=0, return_inverse=True, return_counts=True)
    return edges, counts, inverse.reshape(-1)


def _nonmanifold_vertices(faces: np.ndarray, num_vertices: int) -> int:
    """Vertices whose incident faces do not form one fan through shared edges"""
    num_faces = len(faces)
    records = []
    for i in range(3):
        j = (i + 1) % 3
        u, w = faces[:, i], faces[:, j]
        low_corner = np.where(u < w, 3 * np.arange(num_faces) + i, 3 * np.arange(num_faces) + j)
        high_corner = np.where(u < w, 3 * np.arange(num_faces) + j, 3 * np.arange(num_faces) + i)
        records.append(np.stack([np.minimum(u, w), np.maximum(u, w), low_corner, high_corner], -1))
    records = np.concatenate(records)
    records = records[np.lexsort((records[:, 1], records[:, 0]))]
    same = (records[1:, 0] == records[:-1, 0]) & (records[1:, 1] == records[:-1, 1])
    a, b = records[:-1][same], records[1:][same]
    rows = np.concatenate([a[:, 2], a[:, 3]])
    cols = np.concatenate([b[:, 2], b[:, 3]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(3 * num_faces, 3 * num_faces))
    _, labels = connected_components(graph, directed=False)
    corner_vertex = faces.reshape(-1)
    fans = np.unique(np.stack([corner_vertex, labels], -1), axis=0)
    per_vertex = np.bincount(fans[:, 0], minlength=num_vertices)
    return int((per_vertex > 1).sum())


def check_topology(mesh: MeshLike, self_intersect: bool = True) -> TopoReport:
    vertices, faces = _as_arrays(mesh)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise ValueError(f"Face indices out of range for {len(vertices)} vertices")
    if not len(faces):
        return TopoReport(0, 0, 0, 0, 0, 0, 0, 0, 0)

    edges, counts, _ = edge_table(faces)
    used = np.unique(faces)
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(len(vertices), len(vertices)))
    _, labels = connected_components(graph, directed=False)
    pairs = self_intersections(vertices, faces) if self_intersect else np.zeros((0, 2), dtype=np.int64)
    return TopoReport(
        num_vertices=len(used),
        num_edges=len(edges),
        num_faces=len(faces),
        boundary_edges=int((counts == 1).sum()),
        nonmanifold_edges=int((counts > 2).sum()),
        nonmanifold_vertices=_nonmanifold_vertices(faces, len(vertices)),
        components=len(np.unique(labels[used])),
        euler=int(len(used) - len(edges) + len(faces)),
        self_intersections=len(pairs),
    )


def _orient3d_exact(a, b, c, d) -> int:
    a, b, c, d = ([Fraction(float(x)) for x in p] for p in (a, b, c, d))
    ad = [a[i] - d[i] for i in range(3)]
    bd = [b[i] - d[i] for i in range(3)]
    cd = [c[i] - d[i] for i in range(3)]
    det = (
        ad[0] * (bd[1] * cd[2] - bd[2] * cd[1])
        + bd[0] * (cd[1] * ad[2] - cd[2] * ad[1])
        + cd[0] * (ad[1] * bd[2] - ad[2] * bd[1])
    )
    return (det > 0) - (det < 0)


def orient3d(a, b, c, d) -> np.ndarray:
    """Sign of det[a - d, b - d, c - d] over broadcast (..., 3) arrays"""
    a, b, c, d = np.broadcast_arrays(*(np.asarray(p, dtype=float) for p in (a, b, c, d)))
    shape = a.shape[:-1]
    a, b, c, d = (p.reshape(-1, 3) for p in (a, b, c, d))
    ad, bd, cd = a - d, b - d, c - d
    m1 = bd[..., 1] * cd[..., 2] - bd[..., 2] * cd[..., 1]
    m2 = cd[..., 1] * ad[..., 2] - cd[..., 2] * ad[..., 1]
    m3 = ad[..., 1] * bd[..., 2] - ad[..., 2] * bd[..., 1]
    det = ad[..., 0] * m1 + bd[..., 0] * m2 + cd[..., 0] * m3
    permanent = (
        (np.abs(bd[..., 1] * cd[..., 2]) + np.abs(bd[..., 2] * cd[..., 1])) * np.abs(ad[..., 0])
        + (np.abs(cd[..., 1] * ad[..., 2]) + np.abs(cd[..., 2] * ad[..., 1])) * np.abs(bd[..., 0])
        + (np.abs(ad[..., 1] * bd[..., 2]) + np.abs(ad[..., 2] * bd[..., 1])) * np.abs(cd[..., 0])
    )
    sign = np.sign(det).astype(np.int64)
    for i in np.nonzero(np.abs(det) <= O3D_ERRBOUND * permanent)[0]:
        sign[i] = _orient3d_exact(a[i], b[i], c[i], d[i])
    return sign.reshape(shape)


def _orient2d(a, b, c) -> int:
    det = (a[0] - c[0]) * (b[1] - c[1]) - (a[1] - c[1]) * (b[0] - c[0])
    return (det > 0) - (det < 0)


def _segments_cross_2d(p, q, a, b) -> bool:
    d1, d2 = _orient2d(a, b, p), _orient2d(a, b, q)
    d3, d4 = _orient2d(p, q, a), _orient2d(p, q, b)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True

    def on_segment(x, y, z):
        return min(x[0], y[0]) <= z[0] <= max(x[0], y[0]) and min(x[1], y[1]) <= z[1] <= max(x[1], y[1])

    return (
        (d1 == 0 and on_segment(a, b, p))
        or (d2 == 0 and on_segment(a, b, q))
        or (d3 == 0 and on_segment(p, q, a))
        or (d4 == 0 and on_segment(p, q, b))
    )


def _coplanar_segment_hits(p, q, triangle: np.ndarray) -> bool:
    normal = np.cross(triangle[1] - triangle[0], triangle[2] - triangle[0])
    keep = [i for i in range(3) if i != int(np.argmax(np.abs(normal)))]
    a, b, c = ([Fraction(float(x)) for x in point[keep]] for point in triangle)
    p2, q2 = ([Fraction(float(x)) for x in point[keep]] for point in (p, q))
    for point in (p2, q2):
        signs = {_orient2d(a, b, point), _orient2d(b, c, point), _orient2d(c, a, point)} - {0}
        if len(signs) <= 1:
            return True
    return any(_segments_cross_2d(p2, q2, x, y) for x, y in ((a, b), (b, c), (c, a)))


def _edges_hit(first: np.ndarray, second: np.ndarray, side: np.ndarray) -> np.ndarray:
    """Per pair: does an edge of `first` touch `second`; `side` holds orient3d of first's corners on second's plane"""
    hit = np.zeros(len(first), dtype=bool)
    a, b, c = second[:, 0], second[:, 1], second[:, 2]
    for i, j in ((0, 1), (1, 2), (2, 0)):
        p, q = first[:, i], first[:, j]
        sp, sq = side[:, i], side[:, j]
        crossing = np.nonzero((sp * sq <= 0) & ~((sp == 0) & (sq == 0)) & ~hit)[0]
        if len(crossing):
            s1 = orient3d(p[crossing], q[crossing], a[crossing], b[crossing])
            s2 = orient3d(p[crossing], q[crossing], b[crossing], c[crossing])
            s3 = orient3d(p[crossing], q[crossing], c[crossing], a[crossing])
            through = ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
            hit[crossing[through]] = True
        for n in np.nonzero((sp == 0) & (sq == 0) & ~hit)[0]:
            hit[n] = _coplanar_segment_hits(p[n], q[n], second[n])
    return hit


def triangles_intersect(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Exact closed-set intersection test for (P, 3, 3) batches of triangle pairs"""
    first = np.asarray(first, dtype=float).reshape(-1, 3, 3)
    second = np.asarray(second, dtype=float).reshape(-1, 3, 3)
    side_first = orient3d(second[:, None, 0], second[:, None, 1], second[:, None, 2], first)
    side_second = orient3d(first[:, None, 0], first[:, None, 1], first[:, None, 2], second)
    separated = (side_first > 0).all(1) | (side_first < 0).all(1) | (side_second > 0).all(1) | (side_second < 0).all(1)
    result = np.zeros(len(first), dtype=bool)
    todo = np.nonzero(~separated)[0]
    if len(todo):
        hit = _edges_hit(first[todo], second[todo], side_first[todo])
        rest = ~hit
        hit[rest] = _edges_hit(second[todo][rest], first[todo][rest], side_second[todo][rest])
        result[todo] = hit
    return result


def candidate_pairs(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Triangle pairs with overlapping bounding spheres and boxes, sharing no vertex"""
    tri = vertices[faces]
    centroids = tri.mean(axis=1)
    radii = np.linalg.norm(tri - centroids[:, None], axis=2).max(axis=1)
    pairs = cKDTree(centroids).query_pairs(r=2 * float(radii.max()) + 1e-12, output_type="ndarray")
    if not len(pairs):
        return np.zeros((0, 2), dtype=np.int64)
    i, j = pairs[:, 0], pairs[:, 1]
    near = np.linalg.norm(centroids[i] - centroids[j], axis=1) <= radii[i] + radii[j] + 1e-12
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    boxes = ((lo[i] <= hi[j]) & (lo[j] <= hi[i])).all(axis=1)
    shared = (faces[i][:, :, None] == faces[j][:, None, :]).any(axis=(1, 2))
    keep = near & boxes & ~shared
    return np.sort(pairs[keep], axis=1)


def self_intersections(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Intersecting triangle pairs, pairs sharing a vertex excluded"""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = candidate_pairs(vertices, faces)
    if not len(pairs):
        return pairs
    hits = triangles_intersect(vertices[faces[pairs[:, 0]]], vertices[faces[pairs[:, 1]]])
    return pairs[hits]


def self_intersection_pct(mesh: MeshLike) -> float:
    """Share of triangles that take part in at least one intersecting pair"""
    vertices, faces = _as_arrays(mesh)
    if not len(faces):
        return 0.0
    pairs = self_intersections(vertices, faces)
    return 100.0 * len(np.unique(pairs)) / len(faces)


def point_in_hull(point: Sequence[float], corners: np.ndarray) -> Tuple[bool, float]:
    """Whether `point` is inside the convex hull of `corners`, and its distance to the nearest hull plane"""
    try:
        hull = ConvexHull(np.asarray(corners, dtype=float))
    except QhullError as e:
        raise ValueError(f"Degenerate hull: {e}") from e
    margin = -float((hull.equations[:, :3] @ np.asarray(point, dtype=float) + hull.equations[:, 3]).max())
    return margin >= -HULL_TOLERANCE, margin


def ray_parity_inside(
    points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, direction: Sequence[float] = (0.5774, 0.5771, 0.5777)
) -> np.ndarray:
    """Inside when a ray from the point crosses the surface an odd number of times"""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    mesh = as_trimesh(vertices, faces)
    rays = np.tile(np.asarray(direction, dtype=float) / np.linalg.norm(direction), (len(points), 1))
    _, ray_index = mesh.ray.intersects_id(points, rays, multiple_hits=True)
    return np.bincount(ray_index, minlength=len(points)) % 2 == 1
