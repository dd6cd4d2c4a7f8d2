"""
Sign-configuration tables for Dual Marching Cubes.

Every 8-bit mask (bit c set when corner c is inside) maps to the loops of cut
edges a cell emits, one dual vertex per loop. The tables are traced on the
cube rather than transcribed:

  * a face with two cut edges pairs them,
  * an ambiguous face (four cut edges, alternating signs) separates its two
    inside corners,
  * the cut edges then form a graph where every vertex has degree two, whose
    cycles are the loops.

A face whose two separated inside corners are still joined through the
cell (both of its segments end up in one loop) is a "tunnel face". When the
cells on both sides of a face see it as a tunnel face, the shared vertex
pair would border four quads; those two cells use the alternate case
(index 256 + mask) where the face joins its inside corners instead. A cell
has at most one tunnel face, and a cell with a tunnel face has no other
ambiguous face.
"""
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .logger import logger

NUM_CASES = 512
MAX_LOOPS = 4
MAX_LOOP_LENGTH = 7

# Corner c sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNER_OFFSETS = [(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)]


def _corner(coords: Sequence[int]) -> int:
    return coords[0] | (coords[1] << 1) | (coords[2] << 2)


def _edge_corners(edge: int) -> Tuple[int, int]:
    # Edge 4 * axis + (b0 + 2 * b1): b0, b1 are the other two coordinates in axis order
    axis, rest = divmod(edge, 4)
    others = [a for a in range(3) if a != axis]
    coords = [0, 0, 0]
    coords[others[0]] = rest & 1
    coords[others[1]] = rest >> 1
    start = _corner(coords)
    coords[axis] = 1
    return start, _corner(coords)


EDGE_CORNERS = np.array([_edge_corners(e) for e in range(12)], dtype=np.int64)
EDGE_AXIS = np.arange(12) // 4
_EDGE_BY_CORNERS = {tuple(sorted(pair)): e for e, pair in enumerate(EDGE_CORNERS.tolist())}


def _face_corners(face: int) -> List[int]:
    axis, side = divmod(face, 2)
    p, q = [a for a in range(3) if a != axis]
    corners = []
    for u, v in ((0, 0), (1, 0), (1, 1), (0, 1)):
        coords = [0, 0, 0]
        coords[axis], coords[p], coords[q] = side, u, v
        corners.append(_corner(coords))
    return corners


# Face 2 * axis + side, corners in cyclic order; FACE_EDGES[f][i] joins corners i and i + 1
FACE_CORNERS = np.array([_face_corners(f) for f in range(6)], dtype=np.int64)
FACE_EDGES = np.array(
    [[_EDGE_BY_CORNERS[tuple(sorted((cs[i], cs[(i + 1) % 4])))] for i in range(4)] for cs in FACE_CORNERS.tolist()],
    dtype=np.int64,
)


@dataclass(frozen=True)
class CubeCase:
    """
    Loops of one sign configuration. Loops are kept in canonical trace order
    (start at the smallest edge id, step to its smaller neighbour);
    `orientation[i]` is +1 when that order winds counter-clockwise seen from
    outside (s > 0) and -1 otherwise.
    """

    config: int
    loops: Tuple[Tuple[int, ...], ...]
    orientation: Tuple[int, ...]
    flipped_face: int = -1

    @property
    def num_loops(self) -> int:
        return len(self.loops)

    def oriented_loops(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(
            loop if sign > 0 else (loop[0],) + tuple(reversed(loop[1:]))
            for loop, sign in zip(self.loops, self.orientation)
        )

    def edge_loop(self) -> List[int]:
        owner = [-1] * 12
        for index, loop in enumerate(self.loops):
            for edge in loop:
                owner[edge] = index
        return owner


def inside_corners(config: int) -> List[bool]:
    return [bool((config >> c) & 1) for c in range(8)]


def cut_edges(config: int) -> List[int]:
    inside = inside_corners(config)
    return [e for e, (a, b) in enumerate(EDGE_CORNERS.tolist()) if inside[a] != inside[b]]


def ambiguous_faces(config: int) -> List[int]:
    cut = set(cut_edges(config))
    return [f for f in range(6) if all(e in cut for e in FACE_EDGES[f])]


def face_segments(config: int, face: int, join_inside: bool = False) -> List[Tuple[int, int]]:
    """Pairs of cut edges drawn on one face"""
    inside = inside_corners(config)
    corners = FACE_CORNERS[face].tolist()
    edges = FACE_EDGES[face].tolist()
    cut = set(cut_edges(config))
    face_cut = [e for e in edges if e in cut]
    if len(face_cut) == 2:
        return [(min(face_cut), max(face_cut))]
    if len(face_cut) == 4:
        segments = []
        for i, corner in enumerate(corners):
            # Cut off the corners that stay isolated on this face
            if inside[corner] != join_inside:
                pair = (edges[i - 1], edges[i])
                segments.append((min(pair), max(pair)))
        return segments
    return []


def _orientation(config: int, loop: Sequence[int]) -> int:
    """
    Reads the winding off the first segment of the loop: seen from outside the
    cube, an outward loop keeps the inside corners of that face on its right.
    """
    inside = inside_corners(config)
    corners = np.array(CORNER_OFFSETS, dtype=float)
    first, second = loop[0], loop[1]
    face = next(f for f in range(6) if first in FACE_EDGES[f] and second in FACE_EDGES[f])
    start = corners[EDGE_CORNERS[first]].mean(axis=0)
    end = corners[EDGE_CORNERS[second]].mean(axis=0)
    normal = np.zeros(3)
    normal[face // 2] = 1.0 if face % 2 else -1.0

    shared = set(EDGE_CORNERS[first].tolist()) & set(EDGE_CORNERS[second].tolist())
    corner = shared.pop() if shared else next(c for c in FACE_CORNERS[face].tolist() if inside[c])
    side = float(np.cross(end - start, corners[corner] - start) @ normal)
    assert side != 0, f"Loop {loop} of config {config} has no defined orientation"
    return 1 if inside[corner] == (side < 0) else -1


def trace_case(config: int, flipped_face: int = -1) -> CubeCase:
    neighbours: Dict[int, List[int]] = {e: [] for e in cut_edges(config)}
    for face in range(6):
        for a, b in face_segments(config, face, join_inside=face == flipped_face):
            neighbours[a].append(b)
            neighbours[b].append(a)

    loops = []
    visited = set()
    for start in sorted(neighbours):
        if start in visited:
            continue
        assert len(neighbours[start]) == 2, f"Edge {start} of config {config} is not on two segments"
        loop = [start]
        previous, current = start, min(neighbours[start])
        while current != start:
            loop.append(current)
            a, b = neighbours[current]
            previous, current = current, b if a == previous else a
        visited.update(loop)
        loops.append(tuple(loop))

    return CubeCase(
        config=config,
        loops=tuple(loops),
        orientation=tuple(_orientation(config, loop) for loop in loops),
        flipped_face=flipped_face,
    )


def tunnel_face(case: CubeCase) -> int:
    owner = case.edge_loop()
    for face in ambiguous_faces(case.config):
        segments = face_segments(case.config, face, join_inside=face == case.flipped_face)
        if len({owner[a] for a, _ in segments}) == 1:
            return face
    return -1


def _inside_components(config: int, joined_face: int) -> List[int]:
    """Component label per corner: inside corners linked by inside edges, or across a joined face"""
    inside = inside_corners(config)
    label = list(range(8))

    def find(c):
        while label[c] != c:
            label[c] = label[label[c]]
            c = label[c]
        return c

    links = [tuple(pair) for pair in EDGE_CORNERS.tolist()]
    if joined_face >= 0:
        corners = FACE_CORNERS[joined_face].tolist()
        links += [(corners[0], corners[2]), (corners[1], corners[3])]
    for a, b in links:
        if inside[a] and inside[b]:
            label[find(a)] = find(b)
    return [find(c) for c in range(8)]


def _tet_face_loops(case: CubeCase) -> Tuple[List[int], List[bool]]:
    """
    Loop whose dual vertex stands in for this cell when a tetrahedron
    crosses each face, and whether that choice was forced among several.
    """
    owner = case.edge_loop()
    inside = inside_corners(case.config)
    cut = set(cut_edges(case.config))
    component = _inside_components(case.config, case.flipped_face)

    loops, ambiguous = [], []
    for face in range(6):
        face_cut = [e for e in FACE_EDGES[face].tolist() if e in cut]
        corners = FACE_CORNERS[face].tolist()
        if len(face_cut) == 2:
            loops.append(owner[face_cut[0]])
            ambiguous.append(False)
        elif not face_cut and case.loops and all(inside[c] for c in corners):
            members = {c for c in range(8) if component[c] == component[corners[0]]}
            bounding = sorted({owner[e] for e in cut if set(EDGE_CORNERS[e].tolist()) & members})
            loops.append(bounding[0])
            ambiguous.append(len(bounding) > 1)
        else:
            loops.append(-1)
            ambiguous.append(False)
    return loops, ambiguous


def check_case(case: CubeCase) -> None:
    cut = cut_edges(case.config)
    seen = [e for loop in case.loops for e in loop]
    assert sorted(seen) == sorted(cut), f"Config {case.config}: loops do not cover the cut edges once"
    assert len(case.loops) <= MAX_LOOPS, f"Config {case.config}: {len(case.loops)} loops"
    for loop in case.loops:
        assert 3 <= len(loop) <= MAX_LOOP_LENGTH, f"Config {case.config}: loop {loop} has bad length"


@dataclass(frozen=True)
class DmcTables:
    """
    Case 256 + mask is the alternate case of a mask with a tunnel face; masks
    without one repeat their default case there. All arrays are indexed by
    case (0..511) except `tunnel_face`, which is indexed by mask.
    """

    cases: Tuple[CubeCase, ...]
    edge_loop: np.ndarray  # (512, 12) loop per cell edge, -1 if not cut
    num_loops: np.ndarray  # (512,)
    loop_edges: np.ndarray  # (512, 4, 7) outward-oriented loops, -1 padded
    loop_length: np.ndarray  # (512, 4)
    tunnel_face: np.ndarray  # (256,)
    face_segments: np.ndarray  # (512, 6, 2, 2) cut edge pairs per face, -1 padded
    tet_face_loop: np.ndarray  # (512, 6)
    tet_face_ambiguous: np.ndarray  # (512, 6)

    def lookup(self, config: int, flipped: bool = False) -> CubeCase:
        return self.cases[(config & 0xFF) + (NUM_CASES // 2 if flipped else 0)]


@lru_cache(maxsize=None)
def build_tables() -> DmcTables:
    defaults = [trace_case(mask) for mask in range(256)]
    tunnels = np.array([tunnel_face(case) for case in defaults], dtype=np.int64)
    alternates = []
    for mask, case in enumerate(defaults):
        if tunnels[mask] < 0:
            alternates.append(case)
            continue
        alternate = trace_case(mask, flipped_face=int(tunnels[mask]))
        assert tunnel_face(alternate) < 0, f"Config {mask}: flipping face {tunnels[mask]} leaves a tunnel"
        alternates.append(alternate)
    cases = tuple(defaults + alternates)

    edge_loop = np.full((NUM_CASES, 12), -1, dtype=np.int64)
    num_loops = np.zeros(NUM_CASES, dtype=np.int64)
    loop_edges = np.full((NUM_CASES, MAX_LOOPS, MAX_LOOP_LENGTH), -1, dtype=np.int64)
    loop_length = np.zeros((NUM_CASES, MAX_LOOPS), dtype=np.int64)
    segments = np.full((NUM_CASES, 6, 2, 2), -1, dtype=np.int64)
    tet_face_loop = np.full((NUM_CASES, 6), -1, dtype=np.int64)
    tet_face_ambiguous = np.zeros((NUM_CASES, 6), dtype=bool)

    for index, case in enumerate(cases):
        check_case(case)
        edge_loop[index] = case.edge_loop()
        num_loops[index] = case.num_loops
        for i, loop in enumerate(case.oriented_loops()):
            loop_edges[index, i, : len(loop)] = loop
            loop_length[index, i] = len(loop)
        for face in range(6):
            for j, pair in enumerate(face_segments(case.config, face, join_inside=face == case.flipped_face)):
                segments[index, face, j] = pair
        tet_face_loop[index], tet_face_ambiguous[index] = _tet_face_loops(case)

    logger.debug(f"Built DMC tables, {int((tunnels >= 0).sum())} masks carry a tunnel face")
    return DmcTables(
        cases=cases,
        edge_loop=edge_loop,
        num_loops=num_loops,
        loop_edges=loop_edges,
        loop_length=loop_length,
        tunnel_face=tunnels,
        face_segments=segments,
        tet_face_loop=tet_face_loop,
        tet_face_ambiguous=tet_face_ambiguous,
    )


def lookup(config: int, flipped: bool = False) -> CubeCase:
    return build_tables().lookup(config, flipped)


def dump_tables(path: str, tables: DmcTables = None) -> None:
    tables = tables or build_tables()
    records = []
    for index, case in enumerate(tables.cases):
        records.append(
            {
                "case": index,
                "config": case.config,
                "loops": [list(loop) for loop in case.loops],
                "orientation": list(case.orientation),
                "flipped_face": case.flipped_face,
                "tet_face_loop": tables.tet_face_loop[index].tolist(),
            }
        )
    with open(path, "w") as f:
        json.dump({"tunnel_face": tables.tunnel_face.tolist(), "cases": records}, f, indent=1)
    logger.info(f"✅ Wrote DMC tables to {path}")
