"""
Regular sampling lattice: scalar values and the bounded deformation field.

Vertices and cells are numbered in C order over their index triples, so
vertex (i, j, k) of a grid with resolution (nx, ny, nz) has id
i * (ny + 1) * (nz + 1) + j * (nz + 1) + k.
"""
import json
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch

from .logger import logger

DTYPE = torch.float64
SNAPSHOT_VERSION = 1
SNAPSHOT_FIELDS = ("version", "resolution", "origin", "spacing", "sdf", "deform_raw")

# Corner c of a cell sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CUBE_CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
# tanh reaches 1.0 in float64, keep the offsets strictly inside the bound
DEFORM_MARGIN = 1 - 1e-6

SdfFunction = Callable[[torch.Tensor], torch.Tensor]


class ScalarGrid:
    """
    Scalar field sampled at the vertices of a regular lattice, plus the raw
    (unconstrained) per-vertex deformation. Negative values are inside.
    """

    def __init__(
        self,
        resolution: Sequence[int],
        origin: Sequence[float],
        spacing: float,
        sdf: torch.Tensor,
        deform_raw: Optional[torch.Tensor] = None,
    ):
        self.resolution: Tuple[int, int, int] = tuple(int(r) for r in resolution)  # type: ignore
        assert len(self.resolution) == 3, f"Expected 3 axes, got {resolution}"
        assert min(self.resolution) >= 1, f"Resolution must be >= 1 per axis, got {resolution}"
        assert spacing > 0, f"Spacing must be positive, got {spacing}"
        self.origin = torch.as_tensor(origin, dtype=DTYPE).reshape(3)
        self.spacing = float(spacing)

        sdf = torch.as_tensor(sdf, dtype=DTYPE).reshape(-1)
        if sdf.shape[0] != self.num_vertices:
            raise ValueError(f"Expected {self.num_vertices} sdf values, got {sdf.shape[0]}")
        if not torch.isfinite(sdf).all():
            raise ValueError("sdf contains non-finite values")
        self.sdf = sdf
        if deform_raw is None:
            deform_raw = torch.zeros((self.num_vertices, 3), dtype=DTYPE)
        self.deform_raw = torch.as_tensor(deform_raw, dtype=DTYPE).reshape(self.num_vertices, 3)

    @property
    def vertex_shape(self) -> Tuple[int, int, int]:
        nx, ny, nz = self.resolution
        return (nx + 1, ny + 1, nz + 1)

    @property
    def num_vertices(self) -> int:
        return int(np.prod(self.vertex_shape))

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.resolution))

    @classmethod
    def from_sdf(
        cls,
        fn: SdfFunction,
        resolution: Sequence[int],
        origin: Sequence[float] = (-1.0, -1.0, -1.0),
        spacing: Optional[float] = None,
    ) -> "ScalarGrid":
        """Samples `fn` at the lattice; the default domain is [-1, 1] along the longest axis"""
        if isinstance(resolution, int):
            resolution = (resolution,) * 3
        if spacing is None:
            spacing = 2.0 / max(resolution)
        empty = cls(resolution, origin, spacing, torch.zeros(int(np.prod([r + 1 for r in resolution]))))
        with torch.no_grad():
            sdf = fn(lattice_positions(empty)).to(DTYPE)
        return cls(resolution, origin, spacing, sdf)

    @classmethod
    def sphere(cls, resolution, radius: float = 0.5) -> "ScalarGrid":
        return cls.from_sdf(lambda p: p.norm(dim=-1) - radius, resolution)

    def parameters(self):
        return {"sdf": self.sdf, "deform_raw": self.deform_raw}

    def requires_grad_(self, requires_grad: bool = True) -> "ScalarGrid":
        self.sdf.requires_grad_(requires_grad)
        self.deform_raw.requires_grad_(requires_grad)
        return self

    def detach(self) -> "ScalarGrid":
        return ScalarGrid(
            self.resolution,
            self.origin.clone(),
            self.spacing,
            self.sdf.detach().clone(),
            self.deform_raw.detach().clone(),
        )

    def to_snapshot(self) -> dict:
        """Checkpoint record; keys appear in SNAPSHOT_FIELDS order"""
        return {
            "version": SNAPSHOT_VERSION,
            "resolution": list(self.resolution),
            "origin": self.origin.tolist(),
            "spacing": self.spacing,
            "sdf": self.sdf.detach().tolist(),
            "deform_raw": self.deform_raw.detach().tolist(),
        }

    @classmethod
    def from_snapshot(cls, snapshot: dict) -> "ScalarGrid":
        version = snapshot.get("version")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"Unsupported grid snapshot version {version}")
        return cls(
            snapshot["resolution"],
            snapshot["origin"],
            snapshot["spacing"],
            torch.tensor(snapshot["sdf"], dtype=DTYPE),
            torch.tensor(snapshot["deform_raw"], dtype=DTYPE),
        )

    def save_snapshot(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_snapshot(), f)
        logger.debug(f"Wrote grid snapshot to {path}")

    @classmethod
    def load_snapshot(cls, path: str) -> "ScalarGrid":
        with open(path) as f:
            return cls.from_snapshot(json.load(f))


def vertex_ids(grid: ScalarGrid, ijk: np.ndarray) -> np.ndarray:
    _, ny1, nz1 = grid.vertex_shape
    ijk = np.asarray(ijk, dtype=np.int64)
    return ijk[..., 0] * ny1 * nz1 + ijk[..., 1] * nz1 + ijk[..., 2]


def cell_ids(grid: ScalarGrid, ijk: np.ndarray) -> np.ndarray:
    _, ny, nz = grid.resolution
    ijk = np.asarray(ijk, dtype=np.int64)
    return ijk[..., 0] * ny * nz + ijk[..., 1] * nz + ijk[..., 2]


def cell_index_triples(grid: ScalarGrid) -> np.ndarray:
    nx, ny, nz = grid.resolution
    return np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1).reshape(-1, 3)


def vertex_index_triples(grid: ScalarGrid) -> np.ndarray:
    nx1, ny1, nz1 = grid.vertex_shape
    return np.stack(np.meshgrid(np.arange(nx1), np.arange(ny1), np.arange(nz1), indexing="ij"), -1).reshape(-1, 3)


def cell_corners(grid: ScalarGrid) -> np.ndarray:
    """(num_cells, 8) vertex ids, corners ordered as CUBE_CORNERS"""
    cells = cell_index_triples(grid)
    return vertex_ids(grid, cells[:, None, :] + CUBE_CORNERS[None, :, :])


def grid_edges(grid: ScalarGrid) -> np.ndarray:
    """All lattice edges as (E, 2) vertex id pairs, lower endpoint first"""
    vertices = vertex_index_triples(grid)
    edges = []
    for axis in range(3):
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        inside = vertices[:, axis] < grid.resolution[axis]
        start = vertices[inside]
        edges.append(np.stack([vertex_ids(grid, start), vertex_ids(grid, start + step)], -1))
    return np.concatenate(edges)


def lattice_positions(grid: ScalarGrid) -> torch.Tensor:
    ijk = torch.from_numpy(vertex_index_triples(grid)).to(DTYPE)
    return grid.origin + grid.spacing * ijk


def deformed_positions(grid: ScalarGrid) -> torch.Tensor:
    """Lattice positions displaced by just under 0.5 * h * tanh(deform_raw) per axis"""
    return lattice_positions(grid) + bounded_offsets(0.5 * grid.spacing, grid.deform_raw)


def bounded_offsets(bound, deform_raw: torch.Tensor) -> torch.Tensor:
    return bound * DEFORM_MARGIN * torch.tanh(deform_raw)


def inside_mask(sdf) -> np.ndarray:
    """Zero counts as outside"""
    if isinstance(sdf, torch.Tensor):
        sdf = sdf.detach().cpu().numpy()
    return np.asarray(sdf) < 0


def deformation_bound(grid) -> torch.Tensor:
    """Largest displacement per vertex along each axis (exclusive)"""
    if isinstance(grid, ScalarGrid):
        return torch.full((grid.num_vertices,), 0.5 * grid.spacing, dtype=DTYPE)
    bound = 0.5 * torch.from_numpy(grid.vertex_min_size).to(DTYPE) * (grid.spacing / grid.unit)
    bound[torch.from_numpy(grid.constraints.vertex)] = 0.0
    return bound
