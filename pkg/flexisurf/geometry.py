"""
Point queries against triangle meshes: closest points, signs and surface samples.

Distances are differentiable with respect to both the query points and the
mesh vertices; candidate triangles and closest-point regions are chosen on
detached values. Closed meshes are signed by trimesh ray queries, open ones
by winding number.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import trimesh
from scipy.spatial import cKDTree

from .grid import DTYPE


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1)


def _safe(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x.abs() > 1e-300, x, torch.ones_like(x))


def face_normals(vertices: torch.Tensor, faces: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unit normals and areas per face"""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    cross = torch.cross(b - a, c - a, dim=-1)
    double_area = cross.norm(dim=-1)
    return cross / _safe(double_area)[:, None], double_area / 2


def closest_point_on_triangles(p, a, b, c) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Barycentric coordinates of the closest point of triangle (a, b, c) to p,
    the point itself and the region it falls in (0 face interior, 1..3 a corner,
    4..6 the edges (0, 1), (0, 2), (1, 2)). Broadcasts over leading axes.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    zero, one = torch.zeros_like(d1), torch.ones_like(d1)
    denom = _safe(va + vb + vc)
    face = torch.stack([1 - (vb + vc) / denom, vb / denom, vc / denom], -1)
    t_ab = d1 / _safe(d1 - d3)
    t_ac = d2 / _safe(d2 - d6)
    t_bc = (d4 - d3) / _safe((d4 - d3) + (d5 - d6))
    candidates = [
        # Checked in reverse so that earlier regions win
        (((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)), torch.stack([zero, 1 - t_bc, t_bc], -1), 6),
        (((vb <= 0) & (d2 >= 0) & (d6 <= 0)), torch.stack([1 - t_ac, zero, t_ac], -1), 5),
        (((d6 >= 0) & (d5 <= d6)), torch.stack([zero, zero, one], -1), 3),
        (((vc <= 0) & (d1 >= 0) & (d3 <= 0)), torch.stack([1 - t_ab, t_ab, zero], -1), 4),
        (((d3 >= 0) & (d4 <= d3)), torch.stack([zero, one, zero], -1), 2),
        (((d1 <= 0) & (d2 <= 0)), torch.stack([one, zero, zero], -1), 1),
    ]
    bary = face
    region = torch.zeros(d1.shape, dtype=torch.long)
    for condition, weights, code in candidates:
        bary = torch.where(condition[..., None], weights, bary)
        region = torch.where(condition, torch.full_like(region, code), region)
    point = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
    return bary, point, region


def candidate_faces(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, k: int = 16) -> np.ndarray:
    """Faces whose centroids are the k nearest to each point"""
    centroids = vertices[faces].mean(axis=1)
    k = min(k, len(faces))
    _, index = cKDTree(centroids).query(points, k=k)
    return np.asarray(index, dtype=np.int64).reshape(len(points), k)


@dataclass
class ClosestPoints:
    distance: torch.Tensor  # (P,)
    point: torch.Tensor  # (P, 3)


def closest_points(points: torch.Tensor, vertices: torch.Tensor, faces: torch.Tensor, k: int = 16) -> ClosestPoints:
    assert faces.shape[0] > 0, "Closest points need at least one face"
    faces_np = faces.cpu().numpy()
    candidates = candidate_faces(points.detach().numpy(), vertices.detach().numpy(), faces_np, k)
    tri = faces[torch.from_numpy(candidates)]  # (P, k, 3)
    a, b, c = vertices[tri[..., 0]], vertices[tri[..., 1]], vertices[tri[..., 2]]
    _, point, _ = closest_point_on_triangles(points[:, None, :], a, b, c)
    squared = ((points[:, None, :] - point) ** 2).sum(-1)
    best = squared.detach().argmin(dim=1)
    rows = torch.arange(points.shape[0])
    return ClosestPoints(
        distance=torch.sqrt(squared[rows, best].clamp_min(1e-30)),
        point=point[rows, best],
    )


def as_trimesh(vertices: np.ndarray, faces: np.ndarray) -> trimesh.Trimesh:
    return trimesh.Trimesh(np.asarray(vertices, dtype=float), np.asarray(faces, dtype=np.int64), process=False)


def winding_number(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, chunk: int = 2_000_000) -> np.ndarray:
    """Generalized winding number; about 1 inside a closed outward-oriented mesh, 0 outside"""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = np.asarray(vertices, dtype=float)[faces]
    step = max(1, chunk // max(1, len(faces)))
    result = np.empty(len(points))
    for start in range(0, len(points), step):
        d = tri[None, :, :, :] - points[start : start + step, None, None, :]
        a, b, c = d[..., 0, :], d[..., 1, :], d[..., 2, :]
        la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
        numerator = np.einsum("...i,...i", a, np.cross(b, c))
        denominator = la * lb * lc + (a * b).sum(-1) * lc + (b * c).sum(-1) * la + (c * a).sum(-1) * lb
        result[start : start + step] = (2 * np.arctan2(numerator, denominator)).sum(1) / (4 * np.pi)
    return result


def contains(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, watertight: bool = True) -> np.ndarray:
    """Whether each point is inside the mesh: trimesh ray containment when closed, winding numbers when open"""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if not len(points):
        return np.zeros(0, dtype=bool)
    if watertight:
        return np.asarray(as_trimesh(vertices, faces).contains(points), dtype=bool)
    return winding_number(points, vertices, faces) > 0.5


def signed_distance(
    points: torch.Tensor, vertices: torch.Tensor, faces: torch.Tensor, watertight: bool = True, k: int = 16
) -> torch.Tensor:
    """Distance to the mesh, negative inside"""
    closest = closest_points(points, vertices, faces, k)
    inside = contains(points.detach().numpy(), vertices.detach().numpy(), faces.cpu().numpy(), watertight)
    return torch.from_numpy(np.where(inside, -1.0, 1.0)) * closest.distance


def sample_surface(
    vertices: torch.Tensor, faces: torch.Tensor, count: int, rng: np.random.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Area-weighted uniform samples and the unit normals of their faces"""
    normals, areas = face_normals(vertices, faces)
    weights = areas.detach().numpy()
    chosen = rng.choice(len(weights), size=count, p=weights / weights.sum())
    r1, r2 = np.sqrt(rng.random(count)), rng.random(count)
    bary = torch.from_numpy(np.stack([1 - r1, r1 * (1 - r2), r1 * r2], -1))
    tri = faces[torch.from_numpy(chosen)]
    points = sum(bary[:, i : i + 1] * vertices[tri[:, i]] for i in range(3))
    return points, normals[torch.from_numpy(chosen)]


def stratified_samples(
    vertices: torch.Tensor, faces: torch.Tensor, per_face: int, rng: np.random.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """`per_face` samples on every face, with each sample's share of the total area as its weight"""
    _, areas = face_normals(vertices, faces)
    r1, r2 = np.sqrt(rng.random((len(faces), per_face))), rng.random((len(faces), per_face))
    bary = torch.from_numpy(np.stack([1 - r1, r1 * (1 - r2), r1 * r2], -1))  # (F, k, 3)
    corners = vertices[faces]  # (F, 3, 3)
    points = torch.einsum("fki,fid->fkd", bary, corners).reshape(-1, 3)
    weights = (areas / areas.sum().clamp_min(1e-300)).repeat_interleave(per_face) / per_face
    return points, weights
