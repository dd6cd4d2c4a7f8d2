"""
Shapes a fit is driven towards: builtin analytic SDFs and triangle meshes.

Every target answers signed distance queries, unsigned distances to its
surface and surface samples with normals. Builtins live in [-1, 1]^3 and
take an xyz Euler rotation in degrees and a uniform scale.
"""
import math
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import trimesh
from scipy.spatial.transform import Rotation

from . import geometry
from .extract import extract_mc_baseline
from .grid import DTYPE, ScalarGrid
from .logger import logger

BUILTIN_PREFIX = "builtin:"
NORMALIZED_EXTENT = 1.8
REFERENCE_RESOLUTION = 64
NEWTON_STEPS = 4

Sdf = Callable[[torch.Tensor], torch.Tensor]


def _vec(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE)


def sd_sphere(p: torch.Tensor, radius: float, centre=(0.0, 0.0, 0.0)) -> torch.Tensor:
    return (p - _vec(centre)).norm(dim=-1) - radius


def sd_box(p: torch.Tensor, half, centre=(0.0, 0.0, 0.0)) -> torch.Tensor:
    d = (p - _vec(centre)).abs() - _vec(half)
    return d.clamp_min(0.0).norm(dim=-1) + d.max(dim=-1).values.clamp_max(0.0)


def sd_torus(p: torch.Tensor, major: float, minor: float) -> torch.Tensor:
    """Ring in the xy plane around the z axis"""
    ring = p[..., :2].norm(dim=-1) - major
    return torch.stack([ring, p[..., 2]], -1).norm(dim=-1) - minor


def sd_capsule(p: torch.Tensor, a, b, radius: float) -> torch.Tensor:
    a, b = _vec(a), _vec(b)
    pa, ba = p - a, b - a
    h = ((pa * ba).sum(-1) / (ba * ba).sum()).clamp(0.0, 1.0)
    return (pa - h[..., None] * ba).norm(dim=-1) - radius


def op_union(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.minimum(a, b)


def op_intersection(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.maximum(a, b)


def op_difference(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.maximum(a, -b)


def _cutbox(p: torch.Tensor) -> torch.Tensor:
    return op_difference(sd_box(p, (0.5, 0.5, 0.5)), sd_sphere(p, 0.55, (0.5, 0.5, 0.5)))


def _wedge(p: torch.Tensor) -> torch.Tensor:
    base = sd_box(p, (0.65, 0.2, 0.45), (0.0, -0.3, 0.0))
    ridge = (p[..., 0].abs() + p[..., 1] - 0.3) / math.sqrt(2.0)
    roof = op_intersection(sd_box(p, (0.45, 0.3, 0.35), (0.0, 0.1, 0.0)), ridge)
    return op_union(base, roof)


def _spike(p: torch.Tensor) -> torch.Tensor:
    return op_union(sd_sphere(p, 0.45), sd_capsule(p, (0.0, 0.0, 0.0), (0.85, 0.0, 0.0), 0.06))


BUILTINS: Dict[str, Sdf] = {
    "sphere": lambda p: sd_sphere(p, 0.5),
    "box": lambda p: sd_box(p, (0.5, 0.5, 0.5)),
    "torus": lambda p: sd_torus(p, 0.5, 0.2),
    "cutbox": _cutbox,
    "wedge": _wedge,
    "spike": _spike,
}


def box_mesh(half: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Outward-oriented 12-triangle box, corners numbered like cell corners"""
    corners = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=float)
    faces = [
        [0, 4, 6], [0, 6, 2],
        [1, 3, 7], [1, 7, 5],
        [0, 1, 5], [0, 5, 4],
        [2, 6, 7], [2, 7, 3],
        [0, 2, 3], [0, 3, 1],
        [4, 5, 7], [4, 7, 6],
    ]  # fmt: skip
    return (2 * corners - 1) * half, np.array(faces, dtype=np.int64)


class TargetShape:
    name: str = "target"
    is_watertight: bool = True

    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def distance(self, points: torch.Tensor) -> torch.Tensor:
        """Unsigned distance to the surface, differentiable in `points`"""
        raise NotImplementedError

    def reference_mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def surface_samples(self, count: int, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        vertices, faces = self.reference_mesh()
        points, normals = geometry.sample_surface(torch.from_numpy(vertices), torch.from_numpy(faces), count, rng)
        return points.detach(), normals.detach()


class AnalyticTarget(TargetShape):
    def __init__(
        self,
        name: str,
        fn: Sdf,
        rotate: Sequence[float] = (0.0, 0.0, 0.0),
        scale: float = 1.0,
        exact_mesh: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ):
        if scale <= 0:
            raise ValueError(f"Target scale must be positive, got {scale}")
        self.name = name
        self.fn = fn
        self.scale = float(scale)
        self.rotation = torch.from_numpy(Rotation.from_euler("xyz", list(rotate), degrees=True).as_matrix())
        self._exact_mesh = exact_mesh
        self._mesh: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        local = (points.to(DTYPE) @ self.rotation) / self.scale
        return self.scale * self.fn(local)

    def distance(self, points: torch.Tensor) -> torch.Tensor:
        return self.sdf(points).abs()

    def reference_mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._mesh is None:
            if self._exact_mesh is not None:
                vertices, faces = self._exact_mesh
                self._mesh = (self.scale * vertices @ self.rotation.numpy().T, faces)
            else:
                grid = ScalarGrid.from_sdf(self.sdf, REFERENCE_RESOLUTION)
                self._mesh = extract_mc_baseline(grid).numpy()
            logger.debug(f"Reference mesh of {self.name}: {len(self._mesh[1])} triangles")
        return self._mesh

    def project(self, points: torch.Tensor, steps: int = NEWTON_STEPS) -> Tuple[torch.Tensor, torch.Tensor]:
        """Newton steps onto the zero level set; returns the points and the unit gradients there"""
        points = points.detach().clone()
        for step in range(steps + 1):
            points.requires_grad_(True)
            value = self.sdf(points)
            (gradient,) = torch.autograd.grad(value.sum(), points)
            squared = (gradient * gradient).sum(-1, keepdim=True).clamp_min(1e-12)
            normals = gradient / squared.sqrt()
            points = points.detach()
            if step < steps:
                points = points - value.detach()[:, None] * gradient / squared
        return points, normals.detach()

    def surface_samples(self, count: int, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        if self._exact_mesh is not None:
            return super().surface_samples(count, rng)
        points, _ = super().surface_samples(count, rng)
        return self.project(points)


class MeshTarget(TargetShape):
    def __init__(self, name: str, vertices: np.ndarray, faces: np.ndarray, watertight: bool = True):
        self.name = name
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.is_watertight = watertight
        self._vertices_t = torch.from_numpy(self.vertices)
        self._faces_t = torch.from_numpy(self.faces)

    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        return geometry.signed_distance(points.to(DTYPE), self._vertices_t, self._faces_t, self.is_watertight)

    def distance(self, points: torch.Tensor) -> torch.Tensor:
        return geometry.closest_points(points.to(DTYPE), self._vertices_t, self._faces_t).distance

    def reference_mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices, self.faces


def builtin_target(name: str, rotate: Sequence[float] = (0.0, 0.0, 0.0), scale: float = 1.0) -> AnalyticTarget:
    if name not in BUILTINS:
        raise ValueError(f"Unknown builtin target {name}, expected one of {sorted(BUILTINS)}")
    exact = box_mesh() if name == "box" else None
    return AnalyticTarget(name, BUILTINS[name], rotate, scale, exact)


def normalize_vertices(vertices: np.ndarray, extent: float = NORMALIZED_EXTENT) -> np.ndarray:
    """Centres the bounding box at the origin and scales its longest side to `extent`"""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    longest = float((hi - lo).max())
    if longest <= 0:
        raise ValueError("Mesh has an empty bounding box")
    return (vertices - (lo + hi) / 2) * (extent / longest)


def load_target_mesh(path: str) -> MeshTarget:
    mesh = trimesh.load(path, force="mesh")
    if not isinstance(mesh, trimesh.Trimesh) or not len(mesh.faces):
        raise ValueError(f"{path} holds no triangles")
    watertight = bool(mesh.is_watertight)
    if not watertight:
        logger.warning(f"{path} is not watertight, signs fall back to winding numbers")
    vertices = normalize_vertices(np.asarray(mesh.vertices, dtype=float))
    return MeshTarget(path, vertices, np.asarray(mesh.faces, dtype=np.int64), watertight)


def load_target(spec: str, rotate: Sequence[float] = (0.0, 0.0, 0.0), scale: float = 1.0) -> TargetShape:
    """`builtin:<name>` or a path to a mesh file"""
    if spec.startswith(BUILTIN_PREFIX):
        return builtin_target(spec[len(BUILTIN_PREFIX) :], rotate, scale)
    return load_target_mesh(spec)
