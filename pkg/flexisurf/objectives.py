"""
Loss terms and mesh regularizers.

Every term returns a scalar float64 tensor that is differentiable in the
mesh vertices (and through them in the grid parameters). Samples come from
numpy generators handed in by the caller, so a fixed seed fixes the loss.
"""
import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry
from .extract import QuadMesh, TriMesh
from .grid import DTYPE, ScalarGrid, grid_edges
from .logger import logger
from .meshcheck import check_topology, edge_table
from .targets import TargetShape

# Returned, without gradient, when a loss needs a surface and the extraction is empty
EMPTY_MESH_LOSS = 10.0
SDF_SAMPLES = 1000
SURFACE_SAMPLES = 2000


@dataclass
class LossWeights:
    """
    `mask` scales the completeness half of the surface-point loss and
    `depth` the accuracy half. `edge` is the ceiling of the edge-length ramp
    run after the main fit; `developable` is off unless asked for.
    """

    mask: float = 1.0
    depth: float = 10.0
    sdf: float = 2000.0
    dev: float = 1.0
    sign_start: float = 0.2
    sign_end: float = 0.01
    edge: float = 100.0
    developable: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"Loss weight {name} must be nonnegative, got {value}")

    def sign_weight(self, iteration: int, iterations: int) -> float:
        """Linear decay from sign_start at the first iteration to sign_end at the last"""
        if iterations <= 1:
            return self.sign_start
        t = min(max(iteration / (iterations - 1), 0.0), 1.0)
        return self.sign_start + t * (self.sign_end - self.sign_start)

    @classmethod
    def from_dict(cls, values: Dict[str, float]) -> "LossWeights":
        unknown = set(values) - set(asdict(cls()))
        if unknown:
            raise ValueError(f"Unknown loss weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


def mad(values: torch.Tensor) -> torch.Tensor:
    return (values - values.mean()).abs().mean()


def loss_dev(mesh: Optional[QuadMesh]) -> torch.Tensor:
    """Sum over dual vertices of the mean absolute deviation of their distances to their crossings"""
    if mesh is None or mesh.crossings.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    owner = mesh.crossing_vertex
    offsets = mesh.vertices[owner] - mesh.crossings
    distances = torch.sqrt((offsets * offsets).sum(-1).clamp_min(1e-30))
    num_vertices = mesh.vertices.shape[0]
    counts = torch.zeros(num_vertices, dtype=DTYPE).index_add(0, owner, torch.ones_like(distances))
    means = torch.zeros(num_vertices, dtype=DTYPE).index_add(0, owner, distances) / counts.clamp_min(1.0)
    deviations = (distances - means[owner]).abs()
    per_vertex = torch.zeros(num_vertices, dtype=DTYPE).index_add(0, owner, deviations) / counts.clamp_min(1.0)
    return per_vertex.sum()


def sign_edge_term(s_a: torch.Tensor, s_b: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of sigmoid(s_a) against 1 when s_b > 0, else 0"""
    s_a = torch.as_tensor(s_a, dtype=DTYPE)
    target = (torch.as_tensor(s_b, dtype=DTYPE) > 0).to(DTYPE)
    return F.binary_cross_entropy_with_logits(s_a, target, reduction="none")


def loss_sign(grid) -> torch.Tensor:
    """Both orientations of every sign-change edge; octrees use their minimal edges and projected values"""
    if isinstance(grid, ScalarGrid):
        sdf, edges = grid.sdf, grid_edges(grid)
    else:
        sdf, edges = grid.constrained_sdf(), grid.edge_vertices
    inside = sdf.detach().numpy() < 0
    changes = edges[inside[edges[:, 0]] != inside[edges[:, 1]]]
    if not len(changes):
        return torch.zeros((), dtype=DTYPE)
    a, b = sdf[torch.from_numpy(changes[:, 0])], sdf[torch.from_numpy(changes[:, 1])]
    return (sign_edge_term(a, b) + sign_edge_term(b, a)).sum()


def uniform_samples(count: int, rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, size=(count, 3)))


def mesh_signed_distance(mesh: TriMesh, points: torch.Tensor) -> torch.Tensor:
    vertices, faces = mesh.numpy()
    watertight = check_topology((vertices, faces), self_intersect=False).is_watertight
    if not watertight:
        logger.debug("Extracted mesh is open, signing sdf samples by winding number")
    return geometry.signed_distance(points, mesh.vertices, mesh.faces, watertight)


def loss_sdf(
    mesh: TriMesh, target: TargetShape, rng: np.random.Generator, n_samples: int = SDF_SAMPLES
) -> torch.Tensor:
    """Mean squared difference of target and mesh sdf at uniform samples of the domain"""
    if mesh.is_empty:
        logger.debug("Empty mesh, sdf loss takes its sentinel value")
        return torch.tensor(EMPTY_MESH_LOSS, dtype=DTYPE)
    points = uniform_samples(n_samples, rng)
    with torch.no_grad():
        expected = target.sdf(points)
    return ((mesh_signed_distance(mesh, points) - expected) ** 2).mean()


def surface_point_terms(
    mesh: TriMesh, target: TargetShape, rng: np.random.Generator, n: int = SURFACE_SAMPLES
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Accuracy: area-weighted squared distance from mesh samples to the target.
    Completeness: mean squared distance from target samples to the mesh.
    """
    if mesh.is_empty:
        logger.debug("Empty mesh, surface point losses take their sentinel value")
        sentinel = torch.tensor(EMPTY_MESH_LOSS, dtype=DTYPE)
        return sentinel, sentinel.clone()
    per_face = max(1, math.ceil(n / mesh.faces.shape[0]))
    points, weights = geometry.stratified_samples(mesh.vertices, mesh.faces, per_face, rng)
    accuracy = (weights * target.distance(points) ** 2).sum()
    target_points, _ = target.surface_samples(n, rng)
    completeness = (geometry.closest_points(target_points, mesh.vertices, mesh.faces).distance ** 2).mean()
    return accuracy, completeness


def loss_surface_points(
    mesh: TriMesh, target: TargetShape, rng: np.random.Generator, n: int = SURFACE_SAMPLES
) -> torch.Tensor:
    accuracy, completeness = surface_point_terms(mesh, target, rng, n)
    return (accuracy + completeness) / 2


def edge_length_penalty(lengths: torch.Tensor, mean: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Squared deviation of every triangle side from `mean`, summed and divided by the triangle count"""
    lengths = torch.as_tensor(lengths, dtype=DTYPE).reshape(-1, 3)
    mean = lengths.mean() if mean is None else mean
    return ((lengths - mean) ** 2).sum() / lengths.shape[0]


def reg_edge(mesh: TriMesh) -> torch.Tensor:
    if mesh.is_empty:
        return torch.zeros((), dtype=DTYPE)
    v, f = mesh.vertices, mesh.faces
    sides = torch.stack([v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 1]], v[f[:, 0]] - v[f[:, 2]]], 1)
    lengths = torch.sqrt((sides * sides).sum(-1).clamp_min(1e-30))
    edges = torch.from_numpy(edge_table(f.numpy())[0])
    spans = v[edges[:, 1]] - v[edges[:, 0]]
    edge_lengths = torch.sqrt((spans * spans).sum(-1).clamp_min(1e-30))
    return edge_length_penalty(lengths, edge_lengths.mean())


def reg_developable(mesh: TriMesh) -> torch.Tensor:
    """Sum over interior vertices of the smallest eigenvalue of their area-normalized face normal second moment"""
    if mesh.is_empty:
        return torch.zeros((), dtype=DTYPE)
    faces_np = mesh.faces.numpy()
    normals, areas = geometry.face_normals(mesh.vertices, mesh.faces)
    vertex = mesh.faces.reshape(-1)
    face = torch.arange(mesh.faces.shape[0]).repeat_interleave(3)
    n, w = normals[face], areas[face]
    num_vertices = mesh.vertices.shape[0]
    total = torch.zeros(num_vertices, dtype=DTYPE).index_add(0, vertex, w)
    second = torch.zeros((num_vertices, 3, 3), dtype=DTYPE).index_add(
        0, vertex, w[:, None, None] * n[:, :, None] * n[:, None, :]
    )

    edges, counts, _ = edge_table(faces_np)
    boundary = np.zeros(num_vertices, dtype=bool)
    boundary[edges[counts == 1].reshape(-1)] = True
    interior = np.zeros(num_vertices, dtype=bool)
    interior[np.unique(faces_np)] = True
    interior &= ~boundary
    rows = torch.from_numpy(np.nonzero(interior)[0])
    if not len(rows):
        return torch.zeros((), dtype=DTYPE)
    scale = total[rows].clamp_min(1e-300)
    covariance = second[rows] / scale[:, None, None]
    return torch.linalg.eigvalsh(covariance)[:, 0].sum()
