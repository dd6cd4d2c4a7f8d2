import json

import numpy as np
import pytest
import torch

from flexisurf.grid import (
    CUBE_CORNERS,
    SNAPSHOT_FIELDS,
    ScalarGrid,
    cell_corners,
    deformation_bound,
    deformed_positions,
    grid_edges,
    inside_mask,
    lattice_positions,
    vertex_ids,
    vertex_index_triples,
)


def test_vertex_numbering():
    grid = ScalarGrid((2, 3, 4), (0.0, 0.0, 0.0), 1.0, torch.zeros(3 * 4 * 5))
    assert grid.vertex_shape == (3, 4, 5)
    assert grid.num_cells == 24
    assert vertex_ids(grid, np.array([1, 2, 3])) == 1 * 4 * 5 + 2 * 5 + 3
    triples = vertex_index_triples(grid)
    assert (vertex_ids(grid, triples) == np.arange(grid.num_vertices)).all()
    assert lattice_positions(grid)[vertex_ids(grid, np.array([1, 2, 3]))].tolist() == [1.0, 2.0, 3.0]


def test_cell_corners_follow_corner_offsets():
    grid = ScalarGrid((2, 2, 2), (0.0, 0.0, 0.0), 1.0, torch.zeros(27))
    corners = cell_corners(grid)
    assert corners.shape == (8, 8)
    triples = vertex_index_triples(grid)
    last = corners[-1]
    assert (triples[last] == np.array([1, 1, 1]) + CUBE_CORNERS).all()


def test_grid_edges_count():
    grid = ScalarGrid.sphere(4)
    edges = grid_edges(grid)
    assert len(edges) == 3 * 4 * 5 * 5
    assert (edges[:, 0] < edges[:, 1]).all()
    assert len({tuple(e) for e in edges.tolist()}) == len(edges)


def test_from_sdf_default_domain():
    grid = ScalarGrid.from_sdf(lambda p: p[:, 0], 4)
    assert grid.spacing == 0.5
    assert grid.origin.tolist() == [-1.0, -1.0, -1.0]
    positions = lattice_positions(grid)
    assert positions.min().item() == -1.0
    assert positions.max().item() == 1.0
    assert torch.equal(grid.sdf, positions[:, 0])


def test_sphere_signs():
    grid = ScalarGrid.sphere(4, 0.5)
    inside = inside_mask(grid.sdf)
    centre = vertex_ids(grid, np.array([2, 2, 2]))
    assert inside[centre]
    assert inside.sum() == 1


def test_inside_mask_zero_is_outside():
    assert inside_mask(np.array([-1.0, 0.0, 1.0])).tolist() == [True, False, False]


def test_deformation_stays_within_half_spacing():
    grid = ScalarGrid.sphere(4)
    grid.deform_raw = torch.full((grid.num_vertices, 3), 20.0, dtype=torch.float64)
    offsets = deformed_positions(grid) - lattice_positions(grid)
    assert (offsets.abs() < 0.5 * grid.spacing - 1e-12).all()
    assert offsets.min().item() == pytest.approx(0.5 * grid.spacing)
    assert torch.equal(deformation_bound(grid), torch.full((grid.num_vertices,), 0.25, dtype=torch.float64))


def edge_components(grid: ScalarGrid) -> np.ndarray:
    """For every cell corner and axis, the deformed edge to its neighbour along that axis, measured on that axis"""
    x = deformed_positions(grid).numpy()[cell_corners(grid)]  # (C, 8, 3)
    components = []
    for axis in range(3):
        low = [c for c in range(8) if not (c >> axis) & 1]
        components.append(x[:, [c | 1 << axis for c in low], axis] - x[:, low, axis])
    return np.concatenate(components, 1)


def test_deformed_cells_keep_their_axis_order(rng):
    grid = ScalarGrid.sphere(4)
    for _ in range(10_000 // grid.num_cells):
        raw = rng.standard_normal((grid.num_vertices, 3)) * rng.choice([1.0, 100.0], (grid.num_vertices, 1))
        grid.deform_raw = torch.from_numpy(raw)
        assert (edge_components(grid) > 0).all()


def test_saturated_deformation_can_fold_a_corner():
    grid = ScalarGrid((1, 1, 1), (0.0, 0.0, 0.0), 1.0, torch.zeros(8))
    raw = np.zeros((8, 3))
    raw[0, :2] = 20.0
    raw[1, :2] = -20.0
    raw[2, :2] = -20.0
    grid.deform_raw = torch.from_numpy(raw)
    x = deformed_positions(grid).numpy()
    corner = np.stack([x[1] - x[0], x[2] - x[0], x[4] - x[0]])
    # Both edges at corner 0 swing past each other: the corner Jacobian flips sign
    assert np.linalg.det(corner) < 0
    assert (edge_components(grid) > 0).all()


def test_rejects_bad_values():
    with pytest.raises(ValueError):
        ScalarGrid((1, 1, 1), (0.0, 0.0, 0.0), 1.0, torch.zeros(7))
    with pytest.raises(ValueError):
        ScalarGrid((1, 1, 1), (0.0, 0.0, 0.0), 1.0, torch.tensor([float("nan")] * 8))
    with pytest.raises(AssertionError):
        ScalarGrid((1, 1, 1), (0.0, 0.0, 0.0), 0.0, torch.zeros(8))


def test_snapshot_round_trip(tmp_path):
    grid = ScalarGrid.sphere(3)
    grid.deform_raw = torch.linspace(-1, 1, grid.num_vertices * 3, dtype=torch.float64).reshape(-1, 3)
    path = str(tmp_path / "grid.json")
    grid.save_snapshot(path)
    with open(path) as f:
        assert tuple(json.load(f)) == SNAPSHOT_FIELDS
    loaded = ScalarGrid.load_snapshot(path)
    assert loaded.resolution == grid.resolution
    assert torch.equal(loaded.sdf, grid.sdf)
    assert torch.equal(loaded.deform_raw, grid.deform_raw)


def test_snapshot_version_is_checked():
    snapshot = ScalarGrid.sphere(2).to_snapshot()
    snapshot["version"] = 2
    with pytest.raises(ValueError) as excinfo:
        ScalarGrid.from_snapshot(snapshot)
    assert "version" in str(excinfo.value)
