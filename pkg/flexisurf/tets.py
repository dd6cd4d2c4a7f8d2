"""
Tetrahedral meshes of the inside volume, conforming to the extracted surface.

Vertices are the grid vertices, then the surface dual vertices, then the
midpoints of fully inside cells. Around every grid edge with both ends
inside, each pair of consecutive cells contributes the tetrahedron made of
the edge and one vertex from each cell (the dual vertex whose loop crosses
their shared face, or the cell midpoint). Every sign-change edge contributes
the pyramid from its inside end to its quad, split like the surface quad.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch

from .dmc_tables import DmcTables, build_tables
from .extract import EDGE_CELL_OFFSETS, FlexParams, QuadMesh, cell_cases, extract_quads, split_final
from .grid import DTYPE, ScalarGrid, cell_corners, cell_ids, deformed_positions, inside_mask, vertex_ids
from .logger import logger

# Supplied for shapes normalized to (-0.45, 0.45)^3
THIN_TET_VOLUME = 2e-7


@dataclass
class TetMesh:
    vertices: torch.Tensor  # (V, 3)
    tets: torch.Tensor  # (T, 4) long, positively oriented
    volumes: torch.Tensor  # (T,)
    surface_faces: np.ndarray  # (S, 3) surface triangles in tet vertex ids
    defects: int = 0
    ambiguous_cells: int = 0

    @property
    def num_tets(self) -> int:
        return self.tets.shape[0]

    def total_volume(self) -> float:
        return float(self.volumes.detach().sum())

    def boundary_faces(self) -> np.ndarray:
        """Faces on exactly one tetrahedron, vertex ids sorted per face"""
        return _boundary_faces(self.tets.numpy())

    def numpy(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.detach().cpu().numpy(), self.tets.cpu().numpy()


def signed_volumes(vertices: torch.Tensor, tets: torch.Tensor) -> torch.Tensor:
    a, b, c, d = (vertices[tets[:, i]] for i in range(4))
    return torch.linalg.cross(b - a, c - a, dim=-1).mul(d - a).sum(-1) / 6.0


def _tet_faces(tets: np.ndarray) -> np.ndarray:
    faces = np.concatenate([tets[:, [1, 2, 3]], tets[:, [0, 2, 3]], tets[:, [0, 1, 3]], tets[:, [0, 1, 2]]])
    return np.sort(faces, axis=1)


def _boundary_faces(tets: np.ndarray) -> np.ndarray:
    if not len(tets):
        return np.zeros((0, 3), dtype=np.int64)
    faces, counts = np.unique(_tet_faces(tets), axis=0, return_counts=True)
    return faces[counts == 1]


def _count_defects(tets: np.ndarray, surface_faces: np.ndarray) -> int:
    boundary = {tuple(f) for f in _boundary_faces(tets).tolist()}
    surface = {tuple(f) for f in np.sort(surface_faces, axis=1).tolist()}
    return len(boundary - surface)


def _edge_starts(grid: ScalarGrid, axis: int) -> np.ndarray:
    ranges = [np.arange(r + 1) for r in grid.resolution]
    ranges[axis] = np.arange(grid.resolution[axis])
    return np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, 3)


def _edge_cells(grid: ScalarGrid, axis: int, start: np.ndarray) -> np.ndarray:
    """The four cells around each edge in EDGE_CELL_OFFSETS order, -1 past the domain"""
    b, c = [a for a in range(3) if a != axis]
    resolution = np.array(grid.resolution)
    cells = np.full((len(start), 4), -1, dtype=np.int64)
    for k, (ob, oc) in enumerate(EDGE_CELL_OFFSETS):
        cell = start.copy()
        cell[:, b] += ob
        cell[:, c] += oc
        valid = ((cell >= 0) & (cell < resolution)).all(axis=1)
        cells[valid, k] = cell_ids(grid, cell[valid])
    return cells


def _shared_faces(axis: int) -> List[Tuple[int, int]]:
    """Face of cell k and face of cell k + 1 through which consecutive cells around an edge touch"""
    others = [a for a in range(3) if a != axis]
    shared = []
    for k in range(4):
        first, second = EDGE_CELL_OFFSETS[k], EDGE_CELL_OFFSETS[(k + 1) % 4]
        which = int(np.nonzero(first != second)[0][0])
        d = others[which]
        if first[which] > second[which]:
            shared.append((2 * d, 2 * d + 1))
        else:
            shared.append((2 * d + 1, 2 * d))
    return shared


def extract_tets(
    grid: ScalarGrid, params: FlexParams, tables: Optional[DmcTables] = None, surface: Optional[QuadMesh] = None
) -> TetMesh:
    assert isinstance(grid, ScalarGrid), "Tetrahedral extraction needs a uniform grid"
    tables = tables or build_tables()
    surface = surface if surface is not None else extract_quads(grid, params, tables)

    inside = inside_mask(grid.sdf)
    corners = cell_corners(grid)
    cases = cell_cases(grid, inside, corners, tables)
    loops = tables.num_loops[cases]
    assert surface.vertices.shape[0] == int(loops.sum()), "Surface was extracted from a different grid state"
    base = np.concatenate([[0], np.cumsum(loops)[:-1]]).astype(np.int64)

    n_grid = grid.num_vertices
    n_dual = surface.vertices.shape[0]
    solid = np.nonzero((loops == 0) & inside[corners].all(axis=1))[0]
    midpoint = np.full(grid.num_cells, -1, dtype=np.int64)
    midpoint[solid] = n_grid + n_dual + np.arange(len(solid))

    x = deformed_positions(grid)
    midpoints = x[torch.from_numpy(corners[solid])].mean(dim=1)
    vertices = torch.cat([x, surface.vertices, midpoints])
    gamma = surface.vertex_gamma.detach().numpy()

    tets = []
    ambiguous = set()
    for axis in range(3):
        start = _edge_starts(grid, axis)
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        a, b = vertex_ids(grid, start), vertex_ids(grid, start + step)
        cells = _edge_cells(grid, axis, start)

        both = inside[a] & inside[b]
        for k, (face_k, face_next) in enumerate(_shared_faces(axis)):
            first, second = cells[:, k], cells[:, (k + 1) % 4]
            pick = np.nonzero(both & (first >= 0) & (second >= 0))[0]
            if not len(pick):
                continue
            stand_ins = []
            for cell, face in ((first[pick], face_k), (second[pick], face_next)):
                case = cases[cell]
                loop = tables.tet_face_loop[case, face]
                has_loops = loops[cell] > 0
                assert (loop[has_loops] >= 0).all(), "A face next to an inside edge has no loop crossing it"
                ambiguous.update(cell[has_loops & tables.tet_face_ambiguous[case, face]].tolist())
                stand_ins.append(np.where(has_loops, n_grid + base[cell] + loop, midpoint[cell]))
            tets.append(np.stack([a[pick], b[pick], stand_ins[0], stand_ins[1]], -1))

        full = (cells >= 0).all(axis=1)
        pick = np.nonzero(full & (inside[a] != inside[b]))[0]
        if not len(pick):
            continue
        quad = []
        for k, (ob, oc) in enumerate(EDGE_CELL_OFFSETS):
            cell = cells[pick, k]
            local_edge = 4 * axis + (-ob) + 2 * (-oc)
            quad.append(base[cell] + tables.edge_loop[cases[cell], local_edge])
        q = np.stack(quad, -1)
        apex = np.where(inside[a[pick]], a[pick], b[pick])
        g = gamma[q]
        along13 = (g[:, 0] * g[:, 2] >= g[:, 1] * g[:, 3])[:, None]
        first_tri = np.where(along13, q[:, [0, 1, 2]], q[:, [1, 2, 3]]) + n_grid
        second_tri = np.where(along13, q[:, [0, 2, 3]], q[:, [1, 3, 0]]) + n_grid
        tets.append(np.concatenate([apex[:, None], first_tri], 1))
        tets.append(np.concatenate([apex[:, None], second_tri], 1))

    surface_faces = split_final(surface).faces.numpy() + n_grid
    if not tets:
        logger.debug("No inside grid edges, the tetrahedral mesh is empty")
        empty = torch.zeros((0, 4), dtype=torch.long)
        return TetMesh(vertices, empty, torch.zeros(0, dtype=DTYPE), surface_faces)

    tet_ids = torch.from_numpy(np.concatenate(tets))
    volumes = signed_volumes(vertices, tet_ids).detach()
    flip = volumes < 0
    tet_ids[flip] = tet_ids[flip][:, [0, 1, 3, 2]]
    keep = volumes != 0
    if not bool(keep.all()):
        logger.debug(f"Dropping {int((~keep).sum())} flat tetrahedra")
    tet_ids = tet_ids[keep]

    defects = _count_defects(tet_ids.numpy(), surface_faces)
    if defects:
        logger.debug(f"{defects} tetrahedral boundary faces are not surface triangles")
    return TetMesh(
        vertices=vertices,
        tets=tet_ids,
        volumes=signed_volumes(vertices, tet_ids),
        surface_faces=surface_faces,
        defects=defects,
        ambiguous_cells=len(ambiguous),
    )


def filter_thin_tets(mesh: TetMesh, vol_threshold: float = THIN_TET_VOLUME) -> TetMesh:
    """Drops tetrahedra with volume below `vol_threshold`"""
    keep = mesh.volumes.detach() >= vol_threshold
    tets = mesh.tets[keep]
    return TetMesh(
        vertices=mesh.vertices,
        tets=tets,
        volumes=mesh.volumes[keep],
        surface_faces=mesh.surface_faces,
        defects=_count_defects(tets.numpy(), mesh.surface_faces),
        ambiguous_cells=mesh.ambiguous_cells,
    )
