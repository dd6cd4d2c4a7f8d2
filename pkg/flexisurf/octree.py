"""
Adaptive octree over a base grid.

Leaves are keyed (level, i, j, k) with level-l cell indices; vertices are
keyed by integer "fine" coordinates where one unit is the edge of a cell at
`max_depth`. Point location takes doubled fine coordinates so that face
centres and points half a unit off a face stay integral.

A vertex of a finer leaf face that lies on a coarser neighbour's face but is
not one of its corners is constrained: its value is the bilinear blend of
the coarse face corners and its deformation is frozen at zero.
"""
import copy
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .dmc_tables import FACE_CORNERS, FACE_EDGES, DmcTables
from .extract import AXIS_PARITY, FlexParams, QuadMesh, cell_dual_vertices
from .grid import CUBE_CORNERS, DTYPE, ScalarGrid, bounded_offsets, deformation_bound, vertex_index_triples
from .logger import logger

LeafKey = Tuple[int, int, int, int]
# Quadrants around an edge, matching extract.EDGE_CELL_OFFSETS: +1 is the cell on the positive side
QUADRANT_SIGNS = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
FACE_UV = [(0, 0), (1, 0), (1, 1), (0, 1)]


@dataclass
class Constraints:
    vertex: np.ndarray  # (M,)
    coarse: np.ndarray  # (M, 4) coarse face corners
    weights: np.ndarray  # (M, 4) bilinear weights
    level: np.ndarray  # (M,) level of the coarse face

    def __len__(self) -> int:
        return len(self.vertex)

    def as_dict(self) -> Dict[int, Tuple[Tuple[int, ...], Tuple[float, ...]]]:
        return {
            int(v): (tuple(c.tolist()), tuple(w.tolist()))
            for v, c, w in zip(self.vertex, self.coarse, self.weights)
        }


def _other_axes(axis: int) -> List[int]:
    return [a for a in range(3) if a != axis]


class Octree:
    def __init__(
        self,
        base_resolution: Sequence[int],
        origin: Sequence[float],
        spacing: float,
        max_depth: int,
        leaves: Iterable[LeafKey],
        vertex_keys: np.ndarray,
        sdf: torch.Tensor,
        deform_raw: Optional[torch.Tensor] = None,
    ):
        assert max_depth >= 0, f"max_depth must be >= 0, got {max_depth}"
        self.base_resolution = np.array(base_resolution, dtype=np.int64)
        self.origin = torch.as_tensor(origin, dtype=DTYPE).reshape(3)
        self.spacing = float(spacing)
        self.max_depth = int(max_depth)
        self.unit = 2 ** self.max_depth
        self.leaves: List[LeafKey] = sorted(tuple(int(v) for v in leaf) for leaf in leaves)  # type: ignore
        self.vertex_keys = np.asarray(vertex_keys, dtype=np.int64).reshape(-1, 3)
        self.sdf = torch.as_tensor(sdf, dtype=DTYPE).reshape(-1)
        if deform_raw is None:
            deform_raw = torch.zeros((len(self.vertex_keys), 3), dtype=DTYPE)
        self.deform_raw = torch.as_tensor(deform_raw, dtype=DTYPE).reshape(-1, 3)
        # Off only to show the cracks that unconstrained hanging vertices leave
        self.enforce_constraints = True
        if self.sdf.shape[0] != len(self.vertex_keys):
            raise ValueError(f"Expected {len(self.vertex_keys)} sdf values, got {self.sdf.shape[0]}")
        self._rebuild()

    @classmethod
    def from_grid(cls, grid: ScalarGrid, max_depth: int) -> "Octree":
        triples = vertex_index_triples(grid)
        leaves = [(0, i, j, k) for i, j, k in np.ndindex(*grid.resolution)]
        return cls(
            grid.resolution,
            grid.origin.tolist(),
            grid.spacing,
            max_depth,
            leaves,
            triples * 2 ** max_depth,
            grid.sdf.detach().clone(),
            grid.deform_raw.detach().clone(),
        )

    @property
    def num_cells(self) -> int:
        return len(self.leaves)

    @property
    def num_vertices(self) -> int:
        return len(self.vertex_keys)

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {"sdf": self.sdf, "deform_raw": self.deform_raw}

    def leaf_size(self, level: int) -> int:
        return 2 ** (self.max_depth - level)

    def leaf_corner_keys(self, leaf: LeafKey) -> np.ndarray:
        size = self.leaf_size(leaf[0])
        return np.array(leaf[1:], dtype=np.int64) * size + CUBE_CORNERS * size

    def find_leaf(self, point2: Sequence[int]) -> Optional[int]:
        """Leaf index containing a point given in doubled fine coordinates, None outside the domain"""
        point2 = np.asarray(point2, dtype=np.int64)
        for level in range(self.max_depth + 1):
            index = point2 // (2 * self.leaf_size(level))
            if level == 0 and ((index < 0) | (index >= self.base_resolution)).any():
                return None
            found = self._leaf_index.get((level, *index.tolist()))
            if found is not None:
                return found
        return None

    def _rebuild(self) -> None:
        """Recomputes the topology caches; called whenever the leaf set changes"""
        self._leaf_index = {leaf: i for i, leaf in enumerate(self.leaves)}
        self.vertex_index = {tuple(key): i for i, key in enumerate(self.vertex_keys.tolist())}
        self._check_tiling()

        corners = np.empty((len(self.leaves), 8), dtype=np.int64)
        sizes = np.empty(len(self.leaves), dtype=np.int64)
        for i, leaf in enumerate(self.leaves):
            sizes[i] = self.leaf_size(leaf[0])
            for c, key in enumerate(self.leaf_corner_keys(leaf).tolist()):
                vertex = self.vertex_index.get(tuple(key))
                if vertex is None:
                    raise ValueError(f"Leaf {leaf} has no vertex at corner {key}")
                corners[i, c] = vertex
        self.leaf_corners = corners
        self.leaf_sizes = sizes
        vertex_size = np.full(self.num_vertices, np.iinfo(np.int64).max)
        np.minimum.at(vertex_size, corners.reshape(-1), np.repeat(sizes, 8))
        self.vertex_min_size = vertex_size

        self.face_neighbour = np.full((len(self.leaves), 6), -1, dtype=np.int64)
        for i, leaf in enumerate(self.leaves):
            for face in range(6):
                neighbour = self._across_face(leaf, face)
                if neighbour is not None and self.leaves[neighbour][0] == leaf[0]:
                    self.face_neighbour[i, face] = neighbour

        self.constraints = self.identify_constraints()
        self._minimal_edges()

    def _check_tiling(self) -> None:
        volume = sum(self.leaf_size(level) ** 3 for level, *_ in self.leaves)
        expected = int(np.prod(self.base_resolution)) * self.unit ** 3
        if volume != expected:
            raise ValueError(f"Leaves cover volume {volume}, expected {expected}")
        for level, i, j, k in self.leaves:
            for up in range(1, level + 1):
                ancestor = (level - up, i >> up, j >> up, k >> up)
                if ancestor in self._leaf_index:
                    raise ValueError(f"Leaf {(level, i, j, k)} overlaps its ancestor {ancestor}")

    def _across_face(self, leaf: LeafKey, face: int) -> Optional[int]:
        axis, side = divmod(face, 2)
        size = self.leaf_size(leaf[0])
        point2 = 2 * np.array(leaf[1:], dtype=np.int64) * size + size
        point2[axis] = 2 * (leaf[1 + axis] * size + side * size) + (1 if side else -1)
        return self.find_leaf(point2)

    def identify_constraints(self) -> Constraints:
        """
        Walks every leaf face; when the leaf across is coarser, the corners of
        the fine face that are not corners of the coarse face are constrained
        to it. A vertex seen against several coarse faces keeps the coarsest.
        """
        found: Dict[int, Tuple[int, List[int], List[float]]] = {}
        for leaf in self.leaves:
            level = leaf[0]
            size = self.leaf_size(level)
            base = np.array(leaf[1:], dtype=np.int64) * size
            for face in range(6):
                neighbour = self._across_face(leaf, face)
                if neighbour is None or self.leaves[neighbour][0] >= level:
                    continue
                coarse = self.leaves[neighbour]
                coarse_size = self.leaf_size(coarse[0])
                coarse_base = np.array(coarse[1:], dtype=np.int64) * coarse_size
                axis, side = divmod(face, 2)
                p, q = _other_axes(axis)
                plane = base[axis] + side * size

                coarse_corners, coarse_keys = [], set()
                for u, v in ((0, 0), (1, 0), (0, 1), (1, 1)):
                    key = [0, 0, 0]
                    key[axis] = plane
                    key[p], key[q] = coarse_base[p] + u * coarse_size, coarse_base[q] + v * coarse_size
                    coarse_keys.add(tuple(key))
                    coarse_corners.append(self.vertex_index[tuple(key)])

                for u, v in FACE_UV:
                    key = [0, 0, 0]
                    key[axis], key[p], key[q] = plane, base[p] + u * size, base[q] + v * size
                    if tuple(key) in coarse_keys:
                        continue
                    a = (key[p] - coarse_base[p]) / coarse_size
                    b = (key[q] - coarse_base[q]) / coarse_size
                    weights = [(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b]
                    vertex = self.vertex_index[tuple(key)]
                    if vertex not in found or found[vertex][0] > coarse[0]:
                        found[vertex] = (coarse[0], coarse_corners, weights)

        order = sorted(found, key=lambda v: (found[v][0], v))
        return Constraints(
            vertex=np.array(order, dtype=np.int64),
            coarse=np.array([found[v][1] for v in order], dtype=np.int64).reshape(-1, 4),
            weights=np.array([found[v][2] for v in order], dtype=float).reshape(-1, 4),
            level=np.array([found[v][0] for v in order], dtype=np.int64),
        )

    def _minimal_edges(self) -> None:
        """
        Edges of leaves that hold no finer edge, with the leaf in each of the
        four quadrants around them and where the edge sits on that leaf:
        on one of its edges (local edge id) or inside one of its faces.
        """
        edges: Dict[Tuple[int, int, int, int], int] = {}
        for leaf in self.leaves:
            size = self.leaf_size(leaf[0])
            corners = self.leaf_corner_keys(leaf)
            for axis in range(3):
                for c in range(8):
                    if CUBE_CORNERS[c, axis]:
                        continue
                    start = corners[c]
                    if size > 1:
                        middle = start.copy()
                        middle[axis] += size // 2
                        if tuple(middle.tolist()) in self.vertex_index:
                            continue
                    edges[(axis, *start.tolist())] = size

        records = sorted(edges.items())
        count = len(records)
        self.edge_axis = np.empty(count, dtype=np.int64)
        self.edge_vertices = np.empty((count, 2), dtype=np.int64)
        self.edge_leaf = np.full((count, 4), -1, dtype=np.int64)
        self.edge_local = np.full((count, 4), -1, dtype=np.int64)  # local edge id, or 12 + face
        self.edge_face_uv = np.zeros((count, 4, 2))
        for n, ((axis, *start), size) in enumerate(records):
            start = np.array(start, dtype=np.int64)
            end = start.copy()
            end[axis] += size
            self.edge_axis[n] = axis
            self.edge_vertices[n] = (self.vertex_index[tuple(start.tolist())], self.vertex_index[tuple(end.tolist())])
            b, c = _other_axes(axis)
            middle2 = 2 * start
            middle2[axis] += size
            for quadrant, (sb, sc) in enumerate(QUADRANT_SIGNS):
                point2 = middle2.copy()
                point2[b] += sb
                point2[c] += sc
                found = self.find_leaf(point2)
                if found is None:
                    continue
                self.edge_leaf[n, quadrant] = found
                self.edge_local[n, quadrant], self.edge_face_uv[n, quadrant] = self._edge_on_leaf(
                    self.leaves[found], axis, start, size
                )

    def _edge_on_leaf(self, leaf: LeafKey, axis: int, start: np.ndarray, length: int):
        size = self.leaf_size(leaf[0])
        low = np.array(leaf[1:], dtype=np.int64) * size
        b, c = _other_axes(axis)
        on_b = start[b] in (low[b], low[b] + size)
        on_c = start[c] in (low[c], low[c] + size)
        if on_b and on_c:
            return 4 * axis + int(start[b] == low[b] + size) + 2 * int(start[c] == low[c] + size), (0.0, 0.0)
        if not (on_b or on_c):
            raise ValueError(f"Edge at {start.tolist()} along {axis} runs through the inside of leaf {leaf}")
        normal = b if on_b else c
        face = 2 * normal + int(start[normal] == low[normal] + size)
        p, q = _other_axes(normal)
        middle = start.astype(float)
        middle[axis] += length / 2
        return 12 + face, ((middle[p] - low[p]) / size, (middle[q] - low[q]) / size)

    def lattice_positions(self) -> torch.Tensor:
        return self.origin + torch.from_numpy(self.vertex_keys).to(DTYPE) * (self.spacing / self.unit)

    def deformed_positions(self) -> torch.Tensor:
        """Bound per vertex is half the edge of the smallest leaf touching it; constrained vertices stay put"""
        return self.lattice_positions() + bounded_offsets(deformation_bound(self)[:, None], self.deform_raw)

    def constrained_sdf(self) -> torch.Tensor:
        sdf = self.sdf
        if not self.enforce_constraints or not len(self.constraints):
            return sdf
        for level in np.unique(self.constraints.level):
            rows = np.nonzero(self.constraints.level == level)[0]
            vertex = torch.from_numpy(self.constraints.vertex[rows])
            coarse = torch.from_numpy(self.constraints.coarse[rows])
            weights = torch.from_numpy(self.constraints.weights[rows]).to(DTYPE)
            sdf = sdf.index_put((vertex,), (sdf[coarse] * weights).sum(-1))
        return sdf

    def subdivide(self, leaves: Iterable[int]) -> np.ndarray:
        """
        Splits the given leaves in eight. New vertices take the trilinear
        value of their parent and zero deformation; the current constrained
        values are baked into the stored sdf first. Returns, per new leaf,
        the index of the old leaf it comes from and whether it is a child.
        """
        chosen = set()
        for index in leaves:
            if self.leaves[index][0] >= self.max_depth:
                logger.warning(f"Leaf {self.leaves[index]} is at max depth {self.max_depth}, not subdividing")
                continue
            chosen.add(index)
        origin_of = np.arange(len(self.leaves))
        if not chosen:
            return np.stack([origin_of, np.zeros(len(self.leaves), dtype=np.int64)], -1)

        sdf = self.constrained_sdf().detach().clone()
        deform = self.deform_raw.detach().clone()
        keys = self.vertex_keys.tolist()
        index = dict(self.vertex_index)
        new_sdf: List[float] = []

        new_leaves: List[Tuple[LeafKey, int, int]] = []
        for i, leaf in enumerate(self.leaves):
            if i not in chosen:
                new_leaves.append((leaf, i, 0))
                continue
            level, li, lj, lk = leaf
            corner_values = sdf[torch.from_numpy(self.leaf_corners[i])].numpy()
            half = self.leaf_size(level + 1)
            low = np.array([li, lj, lk], dtype=np.int64) * 2 * half
            for offset in np.ndindex(3, 3, 3):
                key = tuple((low + np.array(offset) * half).tolist())
                if key in index:
                    continue
                t = np.array(offset) / 2.0
                weights = np.prod(np.where(CUBE_CORNERS == 1, t, 1 - t), axis=1)
                index[key] = len(keys)
                keys.append(list(key))
                new_sdf.append(float(weights @ corner_values))
            for child in np.ndindex(2, 2, 2):
                new_leaves.append(((level + 1, 2 * li + child[0], 2 * lj + child[1], 2 * lk + child[2]), i, 1))

        logger.info(f"🔨 Subdividing {len(chosen)} leaves, {len(new_sdf)} new vertices")
        new_leaves.sort()
        self.leaves = [leaf for leaf, _, _ in new_leaves]
        self.vertex_keys = np.array(keys, dtype=np.int64)
        self.sdf = torch.cat([sdf, torch.tensor(new_sdf, dtype=DTYPE)])
        self.deform_raw = torch.cat([deform, torch.zeros((len(new_sdf), 3), dtype=DTYPE)])
        self._rebuild()
        return np.array([(origin, child) for _, origin, child in new_leaves], dtype=np.int64)

    def leaf_cases(self, inside: np.ndarray, tables: DmcTables) -> np.ndarray:
        masks = (inside[self.leaf_corners].astype(np.int64) << np.arange(8)).sum(axis=1)
        tunnel = tables.tunnel_face[masks]
        flip = np.zeros(len(masks), dtype=bool)
        for i in np.nonzero(tunnel >= 0)[0]:
            neighbour = self.face_neighbour[i, tunnel[i]]
            flip[i] = neighbour >= 0 and tables.tunnel_face[masks[neighbour]] == (tunnel[i] ^ 1)
        return masks + 256 * flip

    def _face_loop(self, leaf: int, case: int, face: int, uv, s: np.ndarray, tables: DmcTables) -> int:
        """Loop of a leaf whose segment on `face` is nearest to a face-local point"""
        segments = [pair for pair in tables.face_segments[case, face].tolist() if pair[0] >= 0]
        if not segments:
            return -1
        if len(segments) == 1:
            return int(tables.edge_loop[case, segments[0][0]])
        corners = FACE_CORNERS[face].tolist()
        values = s[self.leaf_corners[leaf, corners]]
        positions = {}
        for i in range(4):
            a, b = values[i], values[(i + 1) % 4]
            t = a / (a - b) if (a < 0) != (b < 0) else 0.5
            ua, va = FACE_UV[i]
            ub, vb = FACE_UV[(i + 1) % 4]
            edge = int(FACE_EDGES[face, i])
            positions[edge] = np.array([ua + t * (ub - ua), va + t * (vb - va)])
        distances = [np.linalg.norm((positions[e0] + positions[e1]) / 2 - np.asarray(uv)) for e0, e1 in segments]
        return int(tables.edge_loop[case, segments[int(np.argmin(distances))][0]])

    def extract_quads(self, params: FlexParams, tables: DmcTables) -> QuadMesh:
        assert params.num_cells == self.num_cells, f"Params for {params.num_cells} leaves, tree has {self.num_cells}"
        s = self.constrained_sdf()
        x = self.deformed_positions()
        s_values = s.detach().numpy()
        inside = s_values < 0
        cases = self.leaf_cases(inside, tables)
        dual = cell_dual_vertices(x, s, self.leaf_corners, params.alpha(), params.beta(), cases, tables)

        v0, v1 = self.edge_vertices[:, 0], self.edge_vertices[:, 1]
        active = np.nonzero((inside[v0] != inside[v1]) & (self.edge_leaf >= 0).all(axis=1))[0]
        quads, triangles, holes = [], [], 0
        for n in active:
            ring = []
            for quadrant in range(4):
                leaf = int(self.edge_leaf[n, quadrant])
                local = int(self.edge_local[n, quadrant])
                case = int(cases[leaf])
                if local < 12:
                    loop = int(tables.edge_loop[case, local])
                else:
                    loop = self._face_loop(leaf, case, local - 12, self.edge_face_uv[n, quadrant], s_values, tables)
                ring.append(-1 if loop < 0 else int(dual.base[leaf]) + loop)
            if min(ring) < 0:
                holes += 1
                continue
            if inside[v0[n]] != (AXIS_PARITY[self.edge_axis[n]] > 0):
                ring = [ring[0], ring[3], ring[2], ring[1]]
            unique = [v for i, v in enumerate(ring) if v != ring[i - 1]]
            if len(unique) == 4:
                quads.append(unique)
            elif len(unique) == 3:
                triangles.append(unique)

        if holes:
            logger.debug(f"Octree extraction left {holes} sign-change edges without a full vertex ring")
        return QuadMesh(
            vertices=dual.vertices,
            quads=torch.tensor(quads, dtype=torch.long).reshape(-1, 4),
            vertex_gamma=params.gamma()[torch.from_numpy(dual.vertex_cell)],
            vertex_cell=dual.vertex_cell,
            vertex_loop=dual.vertex_loop,
            crossings=dual.crossings,
            crossing_vertex=dual.crossing_vertex,
            crossing_edge=dual.crossing_edge,
            triangles=torch.tensor(triangles, dtype=torch.long).reshape(-1, 3),
            holes=holes,
        )

    def leaf_centres(self) -> np.ndarray:
        sizes = self.leaf_sizes[:, None]
        low = np.array([leaf[1:] for leaf in self.leaves], dtype=np.int64).reshape(-1, 3) * sizes
        return self.origin.numpy() + (low + sizes / 2) * (self.spacing / self.unit)


def constrain_octree_sdf(tree: Octree) -> Octree:
    """Copy of the tree whose sdf holds the projected values; gradients reach the coarse corners"""
    projected = copy.copy(tree)
    projected.sdf = tree.constrained_sdf()
    return projected


def remap_params(params: FlexParams, origin: np.ndarray) -> FlexParams:
    """Per-leaf weights after `Octree.subdivide`: kept leaves carry theirs, children start at zero"""
    source = torch.from_numpy(origin[:, 0])
    kept = torch.from_numpy(origin[:, 1] == 0)[:, None]
    remapped = []
    for tensor in params.parameters().values():
        values = tensor.detach()[source]
        mask = kept if values.dim() > 1 else kept[:, 0]
        remapped.append(torch.where(mask, values, torch.zeros_like(values)))
    return FlexParams(*remapped)
