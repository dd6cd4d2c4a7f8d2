import numpy as np
import pytest
import torch

from flexisurf.extract import EDGE_CELL_OFFSETS, FlexParams, extract_quads
from flexisurf.grid import ScalarGrid, deformed_positions
from flexisurf.tets import THIN_TET_VOLUME, TetMesh, extract_tets, filter_thin_tets, signed_volumes


def solid_grid(resolution: int = 3) -> ScalarGrid:
    return ScalarGrid((resolution,) * 3, (-1.0, -1.0, -1.0), 2.0 / resolution, -torch.ones((resolution + 1) ** 3))


def brute_force_solid_count(resolution: int) -> int:
    """One tetrahedron per inside edge and pair of consecutive cells around it that both exist"""
    count = 0
    for axis in range(3):
        b, c = [a for a in range(3) if a != axis]
        for start in np.ndindex(*[resolution + (a != axis) for a in range(3)]):
            exists = []
            for ob, oc in EDGE_CELL_OFFSETS:
                cell = list(start)
                cell[b] += ob
                cell[c] += oc
                exists.append(all(0 <= v < resolution for v in cell))
            count += sum(exists[k] and exists[(k + 1) % 4] for k in range(4))
    return count


def test_solid_grid():
    grid = solid_grid()
    mesh = extract_tets(grid, FlexParams.zeros(grid.num_cells))
    assert mesh.num_tets == brute_force_solid_count(3) == 216
    # A bipyramid of volume h^3 / 3 over each of the 54 inner faces
    assert mesh.total_volume() == pytest.approx(54 * (2 / 3) ** 3 / 3)
    assert (mesh.volumes > 0).all()
    assert mesh.vertices.shape[0] == 64 + 27
    assert len(mesh.surface_faces) == 0


def test_empty_grid():
    grid = ScalarGrid.from_sdf(lambda p: p.norm(dim=-1) + 1.0, 4)
    mesh = extract_tets(grid, FlexParams.zeros(grid.num_cells))
    assert mesh.num_tets == 0
    assert mesh.total_volume() == 0.0


def test_sphere_boundary_is_the_surface(sphere_grid):
    params = FlexParams.zeros(sphere_grid.num_cells)
    surface = extract_quads(sphere_grid, params)
    mesh = extract_tets(sphere_grid, params, surface=surface)
    assert (mesh.volumes > 0).all()
    assert mesh.defects == 0
    boundary = {tuple(f) for f in mesh.boundary_faces().tolist()}
    expected = {tuple(f) for f in np.sort(mesh.surface_faces, axis=1).tolist()}
    assert boundary == expected
    n = sphere_grid.num_vertices
    assert torch.equal(mesh.vertices[:n], deformed_positions(sphere_grid))
    assert torch.equal(mesh.vertices[n : n + surface.vertices.shape[0]], surface.vertices)


@pytest.mark.slow
def test_sphere_volume():
    grid = ScalarGrid.sphere(32, 0.5)
    mesh = extract_tets(grid, FlexParams.zeros(grid.num_cells))
    assert mesh.total_volume() == pytest.approx(4 / 3 * np.pi * 0.5**3, rel=0.05)


def test_volumes_carry_gradients(generator):
    grid = ScalarGrid.sphere(6)
    params = FlexParams.random(grid.num_cells, generator, scale=0.5)
    grid.requires_grad_()
    params.requires_grad_()
    mesh = extract_tets(grid, params)
    sdf_grad, alpha_grad = torch.autograd.grad(mesh.volumes.sum(), [grid.sdf, params.alpha_raw])
    assert sdf_grad.abs().sum() > 0
    assert alpha_grad.abs().sum() > 0


def flat_fixture() -> TetMesh:
    vertices = torch.tensor(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 6e-9]], dtype=torch.float64
    )
    tets = torch.tensor([[0, 1, 2, 3], [0, 1, 2, 4]])
    return TetMesh(vertices, tets, signed_volumes(vertices, tets), np.zeros((0, 3), dtype=np.int64))


def test_filter_thin_tets():
    mesh = flat_fixture()
    assert mesh.volumes[1].item() == pytest.approx(1e-9)

    filtered = filter_thin_tets(mesh, THIN_TET_VOLUME)
    assert filtered.num_tets == mesh.num_tets - 1
    assert filtered.tets.tolist() == [[0, 1, 2, 3]]

    assert torch.equal(filter_thin_tets(mesh, 0.0).tets, mesh.tets)
    assert filter_thin_tets(mesh, float("inf")).num_tets == 0
