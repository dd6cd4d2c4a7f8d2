"""
Differentiable surface extraction on a (deformed) grid.

Per cell, every loop of the cell's case becomes one dual vertex placed at
the beta-weighted mean of its edge crossings, where each crossing is moved
along its edge by the alpha weights of the two corners. Every sign-change
edge with four cells around it becomes a quad over the loops that contain
it. Topology (sign masks, tunnel flips, the final diagonal) never carries
gradient; positions do.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from typing_extensions import Literal

from .dmc_tables import EDGE_CORNERS, DmcTables, build_tables
from .grid import (
    CUBE_CORNERS,
    DTYPE,
    ScalarGrid,
    cell_corners,
    cell_ids,
    cell_index_triples,
    deformed_positions,
    grid_edges,
    inside_mask,
    vertex_ids,
)

Method = Literal["flexicubes", "mc"]

# Cells around an edge along `axis`, as offsets along the other two axes (in axis order)
EDGE_CELL_OFFSETS = np.array([(0, 0), (-1, 0), (-1, -1), (0, -1)], dtype=np.int64)
# +1 when the offset order above turns counter-clockwise about +axis
AXIS_PARITY = np.array([1, -1, 1], dtype=np.int64)


def flex_activation(raw: torch.Tensor) -> torch.Tensor:
    return torch.tanh(raw) + 1.0


@dataclass
class FlexParams:
    """Raw (unconstrained) per-cell weights, never shared between cells"""

    alpha_raw: torch.Tensor  # (C, 8)
    beta_raw: torch.Tensor  # (C, 12)
    gamma_raw: torch.Tensor  # (C,)

    @classmethod
    def zeros(cls, num_cells: int) -> "FlexParams":
        return cls(
            torch.zeros((num_cells, 8), dtype=DTYPE),
            torch.zeros((num_cells, 12), dtype=DTYPE),
            torch.zeros(num_cells, dtype=DTYPE),
        )

    @classmethod
    def random(cls, num_cells: int, generator: torch.Generator, scale: float = 1.0) -> "FlexParams":
        return cls(
            scale * torch.randn((num_cells, 8), generator=generator, dtype=DTYPE),
            scale * torch.randn((num_cells, 12), generator=generator, dtype=DTYPE),
            scale * torch.randn(num_cells, generator=generator, dtype=DTYPE),
        )

    @property
    def num_cells(self) -> int:
        return self.gamma_raw.shape[0]

    def alpha(self) -> torch.Tensor:
        return flex_activation(self.alpha_raw)

    def beta(self) -> torch.Tensor:
        return flex_activation(self.beta_raw)

    def gamma(self) -> torch.Tensor:
        return flex_activation(self.gamma_raw)

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {"alpha_raw": self.alpha_raw, "beta_raw": self.beta_raw, "gamma_raw": self.gamma_raw}

    def requires_grad_(self, requires_grad: bool = True) -> "FlexParams":
        for tensor in self.parameters().values():
            tensor.requires_grad_(requires_grad)
        return self

    def detach(self) -> "FlexParams":
        return FlexParams(*(t.detach().clone() for t in self.parameters().values()))


@dataclass
class QuadMesh:
    """
    Dual mesh with provenance: each vertex knows its emitting cell and loop,
    and each edge crossing knows the vertex it feeds (the crossing sets used
    by the deviation loss).
    """

    vertices: torch.Tensor  # (V, 3)
    quads: torch.Tensor  # (Q, 4) long
    vertex_gamma: torch.Tensor  # (V,)
    vertex_cell: np.ndarray  # (V,)
    vertex_loop: np.ndarray  # (V,)
    crossings: torch.Tensor  # (K, 3)
    crossing_vertex: torch.Tensor  # (K,) long
    crossing_edge: np.ndarray  # (K, 2) grid vertex ids
    triangles: torch.Tensor = field(default_factory=lambda: torch.zeros((0, 3), dtype=torch.long))
    holes: int = 0

    @classmethod
    def from_arrays(cls, vertices, quads, gamma=None) -> "QuadMesh":
        vertices = torch.as_tensor(vertices, dtype=DTYPE)
        n = vertices.shape[0]
        return cls(
            vertices=vertices,
            quads=torch.as_tensor(quads, dtype=torch.long).reshape(-1, 4),
            vertex_gamma=torch.ones(n, dtype=DTYPE) if gamma is None else torch.as_tensor(gamma, dtype=DTYPE),
            vertex_cell=np.arange(n),
            vertex_loop=np.zeros(n, dtype=np.int64),
            crossings=torch.zeros((0, 3), dtype=DTYPE),
            crossing_vertex=torch.zeros(0, dtype=torch.long),
            crossing_edge=np.zeros((0, 2), dtype=np.int64),
        )

    @property
    def is_empty(self) -> bool:
        return self.quads.shape[0] == 0 and self.triangles.shape[0] == 0


@dataclass
class TriMesh:
    vertices: torch.Tensor  # (V, 3)
    faces: torch.Tensor  # (F, 3) long
    midpoint_mask: Optional[torch.Tensor] = None  # (V,) bool, training split only
    vertex_cell: Optional[np.ndarray] = None  # (V,) emitting cell, -1 for inserted midpoints

    @classmethod
    def from_arrays(cls, vertices, faces) -> "TriMesh":
        return cls(torch.as_tensor(vertices, dtype=DTYPE), torch.as_tensor(faces, dtype=torch.long).reshape(-1, 3))

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def numpy(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.detach().cpu().numpy(), self.faces.cpu().numpy()

    def detach(self) -> "TriMesh":
        return TriMesh(self.vertices.detach(), self.faces, self.midpoint_mask, self.vertex_cell)


def edge_crossing(x_i, x_j, s_i, s_j, alpha_i, alpha_j) -> torch.Tensor:
    """
    Zero crossing of the alpha-scaled linear interpolant on segment (x_i, x_j).
    Broadcasts over leading dimensions; scalars get a trailing axis.
    """
    s_i, s_j = torch.as_tensor(s_i, dtype=DTYPE), torch.as_tensor(s_j, dtype=DTYPE)
    alpha_i, alpha_j = torch.as_tensor(alpha_i, dtype=DTYPE), torch.as_tensor(alpha_j, dtype=DTYPE)
    assert bool(((s_i < 0) != (s_j < 0)).all()), "edge_crossing needs a sign change on every edge"
    assert bool((alpha_i > 0).all() and (alpha_j > 0).all()), "alpha weights must be positive"
    a = (s_i * alpha_i).unsqueeze(-1)
    b = (s_j * alpha_j).unsqueeze(-1)
    return (a * torch.as_tensor(x_j, dtype=DTYPE) - b * torch.as_tensor(x_i, dtype=DTYPE)) / (a - b)


def dual_vertex(crossings, beta) -> torch.Tensor:
    crossings = torch.as_tensor(crossings, dtype=DTYPE)
    beta = torch.as_tensor(beta, dtype=DTYPE)
    assert crossings.shape[-2] > 0, "A dual vertex needs at least one crossing"
    assert bool((beta > 0).all()), "beta weights must be positive"
    return (beta.unsqueeze(-1) * crossings).sum(-2) / beta.sum(-1, keepdim=True)


@dataclass
class DualVertices:
    vertices: torch.Tensor
    vertex_cell: np.ndarray
    vertex_loop: np.ndarray
    base: np.ndarray  # (C,) id of each cell's first vertex
    crossings: torch.Tensor
    crossing_vertex: torch.Tensor
    crossing_edge: np.ndarray


def cell_dual_vertices(
    x: torch.Tensor,
    s: torch.Tensor,
    corners: np.ndarray,
    alpha: torch.Tensor,
    beta: torch.Tensor,
    cases: np.ndarray,
    tables: DmcTables,
) -> DualVertices:
    """
    Dual vertices of a set of cells given vertex positions `x`, values `s`,
    each cell's 8 corner vertex ids and its table case. Vertices come out in
    cell-major order, loops in table order.
    """
    loops_per_cell = tables.num_loops[cases]
    base = np.concatenate([[0], np.cumsum(loops_per_cell)[:-1]]).astype(np.int64)
    num_vertices = int(loops_per_cell.sum())
    vertex_cell = np.repeat(np.arange(len(cases)), loops_per_cell)
    vertex_loop = np.arange(num_vertices) - base[vertex_cell]

    owner = tables.edge_loop[cases]  # (C, 12)
    cell, edge = np.nonzero(owner >= 0)
    c0, c1 = EDGE_CORNERS[edge, 0], EDGE_CORNERS[edge, 1]
    v0, v1 = corners[cell, c0], corners[cell, c1]
    cell_t, c0_t, c1_t = (torch.from_numpy(a) for a in (cell, c0, c1))
    crossings = edge_crossing(
        x[torch.from_numpy(v0)],
        x[torch.from_numpy(v1)],
        s[torch.from_numpy(v0)],
        s[torch.from_numpy(v1)],
        alpha[cell_t, c0_t],
        alpha[cell_t, c1_t],
    )
    crossing_vertex = torch.from_numpy(base[cell] + owner[cell, edge])
    weights = beta[cell_t, torch.from_numpy(edge)]

    numerator = torch.zeros((num_vertices, 3), dtype=DTYPE).index_add(0, crossing_vertex, weights[:, None] * crossings)
    denominator = torch.zeros(num_vertices, dtype=DTYPE).index_add(0, crossing_vertex, weights)
    return DualVertices(
        vertices=numerator / denominator.clamp_min(1e-300)[:, None],
        vertex_cell=vertex_cell,
        vertex_loop=vertex_loop,
        base=base,
        crossings=crossings,
        crossing_vertex=crossing_vertex,
        crossing_edge=np.stack([v0, v1], -1),
    )


def cell_cases(grid: ScalarGrid, inside: np.ndarray, corners: np.ndarray, tables: DmcTables) -> np.ndarray:
    """Table case per cell: the mask, plus 256 when both cells across its tunnel face flip it"""
    masks = (inside[corners].astype(np.int64) << np.arange(8)).sum(axis=1)
    tunnel = tables.tunnel_face[masks]
    flip = np.zeros(len(masks), dtype=bool)
    candidates = np.nonzero(tunnel >= 0)[0]
    if candidates.size:
        faces = tunnel[candidates]
        neighbour = cell_index_triples(grid)[candidates]
        neighbour[np.arange(len(candidates)), faces // 2] += 2 * (faces % 2) - 1
        resolution = np.array(grid.resolution)
        in_grid = ((neighbour >= 0) & (neighbour < resolution)).all(axis=1)
        neighbour_mask = masks[cell_ids(grid, np.clip(neighbour, 0, resolution - 1))]
        flip[candidates] = in_grid & (tables.tunnel_face[neighbour_mask] == (faces ^ 1))
    return masks + 256 * flip


def _uniform_quads(grid: ScalarGrid, inside: np.ndarray, cases: np.ndarray, base: np.ndarray, tables: DmcTables):
    resolution = np.array(grid.resolution)
    nx1, ny1, nz1 = grid.vertex_shape
    lattice = np.stack(np.meshgrid(np.arange(nx1), np.arange(ny1), np.arange(nz1), indexing="ij"), -1).reshape(-1, 3)
    quads = []
    for axis in range(3):
        b, c = [a for a in range(3) if a != axis]
        interior = (
            (lattice[:, axis] < resolution[axis])
            & (lattice[:, b] >= 1)
            & (lattice[:, b] < resolution[b])
            & (lattice[:, c] >= 1)
            & (lattice[:, c] < resolution[c])
        )
        start = lattice[interior]
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        lower_inside = inside[vertex_ids(grid, start)]
        changes = lower_inside != inside[vertex_ids(grid, start + step)]
        start, lower_inside = start[changes], lower_inside[changes]
        if not len(start):
            continue

        corners = []
        for ob, oc in EDGE_CELL_OFFSETS:
            offset = np.zeros(3, dtype=np.int64)
            offset[b], offset[c] = ob, oc
            cell = cell_ids(grid, start + offset)
            local_edge = 4 * axis + (-ob) + 2 * (-oc)
            corners.append(base[cell] + tables.edge_loop[cases[cell], local_edge])
        quad = np.stack(corners, -1)
        reverse = lower_inside != (AXIS_PARITY[axis] > 0)
        quad[reverse] = quad[reverse][:, [0, 3, 2, 1]]
        quads.append(quad)
    if not quads:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate(quads)


def extract_quads(grid, params: FlexParams, tables: Optional[DmcTables] = None) -> QuadMesh:
    tables = tables or build_tables()
    if not isinstance(grid, ScalarGrid):
        return grid.extract_quads(params, tables)

    assert params.num_cells == grid.num_cells, f"Expected params for {grid.num_cells} cells, got {params.num_cells}"
    x = deformed_positions(grid)
    inside = inside_mask(grid.sdf)
    corners = cell_corners(grid)
    cases = cell_cases(grid, inside, corners, tables)
    dual = cell_dual_vertices(x, grid.sdf, corners, params.alpha(), params.beta(), cases, tables)
    quads = _uniform_quads(grid, inside, cases, dual.base, tables)
    assert (quads >= 0).all(), "A sign-change edge has no loop in one of its cells"
    return QuadMesh(
        vertices=dual.vertices,
        quads=torch.from_numpy(quads),
        vertex_gamma=params.gamma()[torch.from_numpy(dual.vertex_cell)],
        vertex_cell=dual.vertex_cell,
        vertex_loop=dual.vertex_loop,
        crossings=dual.crossings,
        crossing_vertex=dual.crossing_vertex,
        crossing_edge=dual.crossing_edge,
    )


def split_training(mesh: QuadMesh, gamma: Optional[torch.Tensor] = None) -> TriMesh:
    """Four triangles per quad around the gamma-weighted blend of the two diagonal midpoints"""
    gamma = mesh.vertex_gamma if gamma is None else gamma
    v, q = mesh.vertices, mesh.quads
    g = gamma[q]
    w13 = g[:, 0] * g[:, 2]
    w24 = g[:, 1] * g[:, 3]
    mid13 = (v[q[:, 0]] + v[q[:, 2]]) / 2
    mid24 = (v[q[:, 1]] + v[q[:, 3]]) / 2
    midpoints = (w13[:, None] * mid13 + w24[:, None] * mid24) / (w13 + w24)[:, None]

    m = v.shape[0] + torch.arange(q.shape[0])
    faces = torch.stack(
        [
            torch.stack([q[:, 0], q[:, 1], m], -1),
            torch.stack([q[:, 1], q[:, 2], m], -1),
            torch.stack([q[:, 2], q[:, 3], m], -1),
            torch.stack([q[:, 3], q[:, 0], m], -1),
        ],
        1,
    ).reshape(-1, 3)
    midpoint_mask = torch.cat([torch.zeros(v.shape[0], dtype=torch.bool), torch.ones(q.shape[0], dtype=torch.bool)])
    vertex_cell = np.concatenate([mesh.vertex_cell, np.full(q.shape[0], -1, dtype=np.int64)])
    return TriMesh(torch.cat([v, midpoints]), torch.cat([faces, mesh.triangles]), midpoint_mask, vertex_cell)


def split_final(mesh: QuadMesh, gamma: Optional[torch.Tensor] = None) -> TriMesh:
    """Two triangles per quad along the diagonal with the larger gamma product, (1, 3) on ties"""
    gamma = mesh.vertex_gamma if gamma is None else gamma
    q = mesh.quads
    g = gamma.detach()[q]
    along13 = (g[:, 0] * g[:, 2] >= g[:, 1] * g[:, 3])[:, None]
    first = torch.where(along13, q[:, [0, 1, 2]], q[:, [1, 2, 3]])
    second = torch.where(along13, q[:, [0, 2, 3]], q[:, [1, 3, 0]])
    faces = torch.stack([first, second], 1).reshape(-1, 3)
    return TriMesh(mesh.vertices, torch.cat([faces, mesh.triangles]), vertex_cell=mesh.vertex_cell)


def extract_flexible(grid, params: FlexParams, tables: Optional[DmcTables] = None):
    quads = extract_quads(grid, params, tables)
    return quads, split_training(quads), split_final(quads)


def grid_edge_ids(grid: ScalarGrid, axis: int, start: np.ndarray) -> np.ndarray:
    """Index into `grid_edges(grid)` of the edge along `axis` starting at lattice triple `start`"""
    resolution = np.array(grid.resolution)
    shapes = []
    for a in range(3):
        shape = resolution + 1
        shape[a] = resolution[a]
        shapes.append(shape)
    offset = int(sum(np.prod(shapes[a]) for a in range(axis)))
    _, d1, d2 = shapes[axis]
    return offset + start[..., 0] * d1 * d2 + start[..., 1] * d2 + start[..., 2]


def extract_mc_baseline(grid: ScalarGrid, tables: Optional[DmcTables] = None) -> TriMesh:
    """
    Marching Cubes over the same loops: vertices at the linear crossing of
    each cut grid edge (shared between cells), each loop fanned into
    triangles from its first edge.
    """
    tables = tables or build_tables()
    x = deformed_positions(grid)
    inside = inside_mask(grid.sdf)
    corners = cell_corners(grid)
    cases = cell_cases(grid, inside, corners, tables)

    edges = grid_edges(grid)
    cut = np.nonzero(inside[edges[:, 0]] != inside[edges[:, 1]])[0]
    if not len(cut):
        return TriMesh(torch.zeros((0, 3), dtype=DTYPE), torch.zeros((0, 3), dtype=torch.long))
    e0, e1 = torch.from_numpy(edges[cut, 0]), torch.from_numpy(edges[cut, 1])
    ones = torch.ones(len(cut), dtype=DTYPE)
    vertices = edge_crossing(x[e0], x[e1], grid.sdf[e0], grid.sdf[e1], ones, ones)
    vertex_of_edge = np.full(len(edges), -1, dtype=np.int64)
    vertex_of_edge[cut] = np.arange(len(cut))

    cells = cell_index_triples(grid)
    local = np.empty((len(cells), 12), dtype=np.int64)
    for e in range(12):
        start = cells + CUBE_CORNERS[EDGE_CORNERS[e, 0]]
        local[:, e] = vertex_of_edge[grid_edge_ids(grid, e // 4, start)]

    loop_edges = tables.loop_edges[cases]  # (C, 4, 7)
    lengths = tables.loop_length[cases]  # (C, 4)
    fans = np.stack(
        [np.where((i + 1 < lengths)[..., None], loop_edges[:, :, [0, i, i + 1]], -1) for i in range(1, 6)], 2
    )  # (C, 4, 5, 3): cell-major, then loop, then fan position
    cell_of = np.repeat(np.arange(len(cells)), 4 * 5)
    tri = fans.reshape(-1, 3)
    valid = (tri >= 0).all(axis=1)
    faces = local[cell_of[valid][:, None], tri[valid]]
    assert (faces >= 0).all(), "A loop edge has no crossing vertex"
    return TriMesh(vertices, torch.from_numpy(faces))


class Scene:
    """
    What a fitting run optimizes: a grid (uniform or octree), the per-cell
    flexible weights and the extraction method.
    """

    def __init__(
        self,
        grid,
        params: Optional[FlexParams] = None,
        tables: Optional[DmcTables] = None,
        method: Method = "flexicubes",
    ):
        self.grid = grid
        self.method = method
        self.tables = tables or build_tables()
        self.params = params if params is not None else FlexParams.zeros(grid.num_cells)

    def parameters(self) -> Dict[str, torch.Tensor]:
        groups = dict(self.grid.parameters())
        if self.method == "flexicubes":
            groups.update(self.params.parameters())
        return groups

    def requires_grad_(self, requires_grad: bool = True) -> "Scene":
        for tensor in self.parameters().values():
            tensor.requires_grad_(requires_grad)
        return self

    def extract(self) -> Tuple[Optional[QuadMesh], TriMesh]:
        """Returns the quad mesh (None for mc) and the mesh the losses see"""
        if self.method == "mc":
            return None, extract_mc_baseline(self.grid, self.tables)
        quads = extract_quads(self.grid, self.params, self.tables)
        return quads, split_training(quads)

    def final_mesh(self) -> TriMesh:
        if self.method == "mc":
            return extract_mc_baseline(self.grid, self.tables)
        return split_final(extract_quads(self.grid, self.params, self.tables))
