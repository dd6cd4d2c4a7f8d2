import json

import numpy as np
import pytest

from flexisurf.dmc_tables import (
    CORNER_OFFSETS,
    EDGE_CORNERS,
    MAX_LOOPS,
    NUM_CASES,
    ambiguous_faces,
    build_tables,
    check_case,
    cut_edges,
    dump_tables,
    lookup,
)


def edge_midpoint(edge: int) -> np.ndarray:
    a, b = EDGE_CORNERS[edge]
    return (np.array(CORNER_OFFSETS[a]) + np.array(CORNER_OFFSETS[b])) / 2


def loop_normal(loop) -> np.ndarray:
    points = [edge_midpoint(e) for e in loop]
    normal = np.zeros(3)
    for i in range(len(points)):
        normal += np.cross(points[i], points[(i + 1) % len(points)])
    return normal


@pytest.fixture(scope="module")
def tables():
    return build_tables()


def test_edge_numbering():
    # Edge 4 * axis + b0 + 2 * b1 runs along `axis` from the corner offset by b0, b1 on the other axes
    assert EDGE_CORNERS[0].tolist() == [0, 1]
    assert EDGE_CORNERS[4].tolist() == [0, 2]
    assert EDGE_CORNERS[8].tolist() == [0, 4]
    assert EDGE_CORNERS[11].tolist() == [3, 7]


def test_trivial_cases(tables):
    assert len(tables.cases) == NUM_CASES
    assert tables.num_loops[0] == 0
    assert tables.num_loops[255] == 0
    assert (tables.edge_loop[0] == -1).all()


def test_single_corner(tables):
    case = tables.lookup(1)
    assert case.num_loops == 1
    assert sorted(case.loops[0]) == [0, 4, 8]
    assert tables.loop_length[1, 0] == 3


def test_separated_corners_make_four_loops(tables):
    # Corners 0, 3, 5 and 6 touch no common edge
    mask = 1 | 8 | 32 | 64
    assert len(ambiguous_faces(mask)) == 6
    assert tables.num_loops[mask] == MAX_LOOPS
    assert tables.tunnel_face[mask] == -1


def test_every_case_covers_its_cut_edges(tables):
    for index, case in enumerate(tables.cases):
        check_case(case)
        assert int(tables.loop_length[index].sum()) == len(cut_edges(case.config))
        assert sorted(np.nonzero(tables.edge_loop[index] >= 0)[0].tolist()) == cut_edges(case.config)


def test_loops_face_the_outside(tables):
    centre = np.full(3, 0.5)
    for corner in range(8):
        position = np.array(CORNER_OFFSETS[corner], dtype=float)
        alone = tables.lookup(1 << corner).oriented_loops()[0]
        assert loop_normal(alone) @ (centre - position) > 0
        others = tables.lookup(0xFF ^ (1 << corner)).oriented_loops()[0]
        assert loop_normal(others) @ (position - centre) > 0


def test_complement_reverses_unambiguous_cases(tables):
    for mask in range(256):
        if ambiguous_faces(mask):
            continue
        case, complement = tables.lookup(mask), tables.lookup(0xFF ^ mask)
        assert case.loops == complement.loops
        assert case.orientation == tuple(-o for o in complement.orientation)


def test_alternate_cases_remove_the_tunnel(tables):
    tunnels = np.nonzero(tables.tunnel_face >= 0)[0]
    assert len(tunnels) > 0
    for mask in tunnels.tolist():
        alternate = tables.lookup(mask, flipped=True)
        assert alternate.flipped_face == tables.tunnel_face[mask]
        assert sorted(e for loop in alternate.loops for e in loop) == cut_edges(mask)
        assert alternate.num_loops != tables.lookup(mask).num_loops or alternate.loops != tables.lookup(mask).loops
    for mask in np.nonzero(tables.tunnel_face < 0)[0].tolist():
        assert tables.lookup(mask, flipped=True) == tables.lookup(mask)


def test_tet_face_loops_exist_next_to_inside_edges(tables):
    for index, case in enumerate(tables.cases):
        if not case.num_loops:
            continue
        inside = [(case.config >> c) & 1 for c in range(8)]
        for edge, (a, b) in enumerate(EDGE_CORNERS.tolist()):
            if not (inside[a] and inside[b]):
                continue
            axis = edge // 4
            for face in range(6):
                if face // 2 == axis:
                    continue
                side = CORNER_OFFSETS[a][face // 2]
                if side == face % 2 and CORNER_OFFSETS[b][face // 2] == side:
                    assert tables.tet_face_loop[index, face] >= 0


def test_module_lookup_matches_tables(tables):
    assert lookup(1) == tables.lookup(1)
    assert lookup(256 + 1) == tables.lookup(1)


def test_dump_tables(tmp_path, tables):
    path = str(tmp_path / "tables.json")
    dump_tables(path, tables)
    with open(path) as f:
        dumped = json.load(f)
    assert len(dumped["cases"]) == NUM_CASES
    assert dumped["cases"][1]["loops"] == [list(tables.lookup(1).loops[0])]
    assert dumped["tunnel_face"] == tables.tunnel_face.tolist()
