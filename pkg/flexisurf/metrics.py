"""
Reconstruction accuracy against a target and intrinsic triangle quality.

Accuracy metrics compare point clouds sampled on both surfaces; quality
metrics follow the VTK triangle definitions (1 for an equilateral triangle).
"""
import json
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import geometry
from .extract import TriMesh
from .logger import logger
from .meshcheck import check_topology, self_intersection_pct
from .targets import TargetShape

F1_THRESHOLD = 0.003
EDGE_DOT_THRESHOLD = 0.2
EDGE_NEIGHBOURS = 10
NORMAL_ANGLE = 5.0
METRIC_SAMPLES = 100_000


@dataclass
class MetricReport:
    cd: float
    f1: float
    ecd: Optional[float]
    ef1: Optional[float]
    in5: float
    ar_gt4_pct: float
    rr_gt4_pct: float
    min_angle_lt10_pct: float
    si_pct: float
    nv_pct: float
    ne_pct: float
    min_angle: float
    max_angle: float
    mean_min_angle: float
    num_triangles: int
    num_samples: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def nn_correspondence(source: np.ndarray, query: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """For each query point, the distance to and index of the nearest source point"""
    distances, indices = cKDTree(source).query(query, k=1)
    return np.asarray(distances), np.asarray(indices)


def chamfer_f1(pred: np.ndarray, gt: np.ndarray, threshold: float = F1_THRESHOLD) -> Tuple[float, float]:
    d_pred, _ = nn_correspondence(gt, pred)
    d_gt, _ = nn_correspondence(pred, gt)
    precision = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return float((d_pred.mean() + d_gt.mean()) / 2), f1


def edge_points(points: np.ndarray, normals: np.ndarray, k: int = EDGE_NEIGHBOURS) -> np.ndarray:
    """Samples with a neighbour whose normal is close to perpendicular"""
    k = min(k, len(points))
    _, neighbours = cKDTree(points).query(points, k=k)
    neighbours = np.asarray(neighbours).reshape(len(points), k)
    dots = np.abs((normals[:, None, :] * normals[neighbours]).sum(-1))
    return dots.min(axis=1) < EDGE_DOT_THRESHOLD


def inaccurate_normals_pct(pred, pred_normals, gt, gt_normals, angle: float = NORMAL_ANGLE) -> float:
    """Nearest-neighbour pairs in both directions whose normals differ by more than `angle` degrees"""
    _, to_gt = nn_correspondence(gt, pred)
    _, to_pred = nn_correspondence(pred, gt)
    dots = np.concatenate(
        [(pred_normals * gt_normals[to_gt]).sum(1), (gt_normals * pred_normals[to_pred]).sum(1)]
    )
    return float(100.0 * np.mean(dots < np.cos(np.radians(angle))))


def triangle_quality(vertices: np.ndarray, faces: np.ndarray) -> dict:
    tri = vertices[faces]
    a = np.linalg.norm(tri[:, 1] - tri[:, 2], axis=1)
    b = np.linalg.norm(tri[:, 2] - tri[:, 0], axis=1)
    c = np.linalg.norm(tri[:, 0] - tri[:, 1], axis=1)
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    perimeter = a + b + c
    with np.errstate(divide="ignore", invalid="ignore"):
        aspect = np.where(area > 0, np.maximum(np.maximum(a, b), c) * perimeter / (4 * np.sqrt(3) * area), np.inf)
        radius = np.where(area > 0, a * b * c * perimeter / (16 * area**2), np.inf)
        angles = []
        for opposite, s1, s2 in ((a, b, c), (b, c, a), (c, a, b)):
            cosine = (s1**2 + s2**2 - opposite**2) / (2 * s1 * s2)
            angles.append(np.degrees(np.arccos(np.clip(np.nan_to_num(cosine, nan=1.0), -1.0, 1.0))))
    angles = np.stack(angles, 1)
    return {
        "aspect_ratio": aspect,
        "radius_ratio": radius,
        "min_angle": angles.min(axis=1),
        "max_angle": angles.max(axis=1),
        "angles": angles,
    }


def metrics(
    mesh: TriMesh, target: TargetShape, rng: np.random.Generator, num_samples: int = METRIC_SAMPLES
) -> MetricReport:
    assert not mesh.is_empty, "Metrics need a non-empty mesh"
    vertices, faces = mesh.numpy()
    with torch.no_grad():
        pred, pred_normals = geometry.sample_surface(
            torch.from_numpy(vertices), torch.from_numpy(faces), num_samples, rng
        )
        gt, gt_normals = target.surface_samples(num_samples, rng)
    pred, pred_normals = pred.numpy(), pred_normals.numpy()
    gt, gt_normals = gt.numpy(), gt_normals.numpy()

    cd, f1 = chamfer_f1(pred, gt)
    pred_edges, gt_edges = edge_points(pred, pred_normals), edge_points(gt, gt_normals)
    ecd: Optional[float] = None
    ef1: Optional[float] = None
    if pred_edges.any() and gt_edges.any():
        ecd, ef1 = chamfer_f1(pred[pred_edges], gt[gt_edges])
    else:
        logger.debug(f"No sharp edge samples on {'prediction' if not pred_edges.any() else 'target'}")

    quality = triangle_quality(vertices, faces)
    topology = check_topology((vertices, faces), self_intersect=False)
    return MetricReport(
        cd=cd,
        f1=f1,
        ecd=ecd,
        ef1=ef1,
        in5=inaccurate_normals_pct(pred, pred_normals, gt, gt_normals),
        ar_gt4_pct=float(100.0 * np.mean(quality["aspect_ratio"] > 4)),
        rr_gt4_pct=float(100.0 * np.mean(quality["radius_ratio"] > 4)),
        min_angle_lt10_pct=float(100.0 * np.mean(quality["min_angle"] < 10)),
        si_pct=self_intersection_pct((vertices, faces)),
        nv_pct=100.0 * topology.nonmanifold_vertices / max(topology.num_vertices, 1),
        ne_pct=100.0 * topology.nonmanifold_edges / max(topology.num_edges, 1),
        min_angle=float(quality["min_angle"].min()),
        max_angle=float(quality["max_angle"].max()),
        mean_min_angle=float(quality["min_angle"].mean()),
        num_triangles=len(faces),
        num_samples=num_samples,
    )
