import numpy as np
import pytest
import torch

from flexisurf.extract import (
    FlexParams,
    QuadMesh,
    Scene,
    dual_vertex,
    edge_crossing,
    extract_flexible,
    extract_mc_baseline,
    extract_quads,
    split_final,
    split_training,
)
from flexisurf.dmc_tables import build_tables
from flexisurf.grid import ScalarGrid, cell_corners, deformed_positions, grid_edges, inside_mask, vertex_ids
from flexisurf.meshcheck import check_topology, point_in_hull
from flexisurf.targets import sd_torus


def enclosed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def closed_random_grid(resolution: int, rng: np.random.Generator) -> ScalarGrid:
    grid = ScalarGrid.sphere(resolution)
    sdf = rng.uniform(-1.0, 1.0, grid.vertex_shape)
    sdf[[0, -1], :, :] = sdf[:, [0, -1], :] = sdf[:, :, [0, -1]] = 1.0
    grid.sdf = torch.from_numpy(sdf.reshape(-1))
    return grid


@pytest.mark.parametrize(
    "s_j, alpha_i, alpha_j, expected",
    [(1.0, 1.0, 1.0, 0.5), (3.0, 1.0, 1.0, 0.25), (1.0, 2.0, 0.5, 0.8)],
)
def test_edge_crossing(s_j, alpha_i, alpha_j, expected):
    crossing = edge_crossing((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), -1.0, s_j, alpha_i, alpha_j)
    assert crossing.tolist() == pytest.approx([expected, 0.0, 0.0], abs=1e-15)


def test_edge_crossing_needs_a_sign_change():
    with pytest.raises(AssertionError):
        edge_crossing((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, 2.0, 1.0, 1.0)


def test_dual_vertex():
    crossings = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)]
    assert dual_vertex(crossings, [2.0, 1.0, 1.0]).tolist() == pytest.approx([0.25, 0.25, 0.0])
    assert dual_vertex(crossings, [1.0, 1.0, 1.0]).tolist() == pytest.approx([1 / 3, 1 / 3, 0.0])
    assert dual_vertex(crossings, [1e12, 1.0, 1.0]).tolist() == pytest.approx([0.0, 0.0, 0.0], abs=1e-11)
    with pytest.raises(AssertionError):
        dual_vertex(torch.zeros((0, 3)), torch.zeros(0))


@pytest.mark.parametrize("gamma, expected", [((1, 1, 1, 1), 0.25), ((3, 1, 1, 1), 0.375)])
def test_split_training_midpoint(gamma, expected):
    square = [(0, 0, 0), (1, 0, 0), (1, 1, 1), (0, 1, 0)]
    mesh = split_training(QuadMesh.from_arrays(square, [[0, 1, 2, 3]], gamma))
    assert mesh.vertices[4].tolist() == pytest.approx([0.5, 0.5, expected])
    assert mesh.faces.tolist() == [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]]
    assert mesh.midpoint_mask.tolist() == [False] * 4 + [True]


@pytest.mark.parametrize(
    "gamma, expected",
    [
        ((2, 1, 2, 1), [[0, 1, 2], [0, 2, 3]]),
        ((1, 1, 1, 1), [[0, 1, 2], [0, 2, 3]]),
        ((1, 2, 1, 2), [[1, 2, 3], [1, 3, 0]]),
    ],
)
def test_split_final_diagonal(gamma, expected):
    square = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]
    mesh = split_final(QuadMesh.from_arrays(square, [[0, 1, 2, 3]], gamma))
    assert mesh.faces.tolist() == expected
    assert mesh.vertices.shape[0] == 4


def test_single_inside_vertex_gives_a_cube():
    grid = ScalarGrid.sphere(3)
    grid.sdf = torch.ones(grid.num_vertices, dtype=torch.float64)
    centre = int(vertex_ids(grid, np.array([1, 1, 1])))
    grid.sdf[centre] = -1.0

    quads = extract_quads(grid, FlexParams.zeros(grid.num_cells))
    assert quads.vertices.shape[0] == 8
    assert quads.quads.shape[0] == 6
    assert (np.bincount(quads.quads.numpy().reshape(-1)) == 3).all()

    vertices, faces = split_final(quads).numpy()
    report = check_topology((vertices, faces))
    assert report.is_watertight
    assert report.euler == 2
    assert report.self_intersections == 0
    # Faces point away from the inside vertex
    assert enclosed_volume(vertices - deformed_positions(grid)[centre].numpy(), faces) > 0


def test_empty_grid_gives_empty_meshes():
    grid = ScalarGrid.from_sdf(lambda p: p.norm(dim=-1) + 1.0, 4)
    quads = extract_quads(grid, FlexParams.zeros(grid.num_cells))
    assert quads.is_empty
    assert split_final(quads).is_empty
    assert extract_mc_baseline(grid).is_empty


def test_sphere_is_closed_genus_zero(sphere_grid):
    quads = extract_quads(sphere_grid, FlexParams.zeros(sphere_grid.num_cells))
    vertices, faces = split_final(quads).numpy()
    report = check_topology((vertices, faces), self_intersect=False)
    assert report.is_watertight
    assert report.euler == 2
    assert report.components == 1
    assert enclosed_volume(vertices, faces) == pytest.approx(4 / 3 * np.pi * 0.5**3, rel=0.05)
    radii = np.linalg.norm(vertices, axis=1)
    assert np.abs(radii - 0.5).max() < sphere_grid.spacing


def test_training_split_keeps_topology(sphere_grid):
    quads = extract_quads(sphere_grid, FlexParams.zeros(sphere_grid.num_cells))
    mesh = split_training(quads)
    assert mesh.vertices.shape[0] == quads.vertices.shape[0] + quads.quads.shape[0]
    assert mesh.faces.shape[0] == 4 * quads.quads.shape[0]
    report = check_topology(mesh, self_intersect=False)
    assert report.is_watertight
    assert report.euler == 2


def test_extract_flexible(sphere_grid):
    quads, training, final = extract_flexible(sphere_grid, FlexParams.zeros(sphere_grid.num_cells))
    assert training.faces.shape[0] == 4 * quads.quads.shape[0]
    assert final.faces.shape[0] == 2 * quads.quads.shape[0]
    assert torch.equal(final.vertices, quads.vertices)
    assert check_topology(final).euler == 2


def test_mc_baseline_sphere(sphere_grid):
    report = check_topology(extract_mc_baseline(sphere_grid), self_intersect=False)
    assert report.is_watertight
    assert report.euler == 2


def test_torus_has_genus_one():
    grid = ScalarGrid.from_sdf(lambda p: sd_torus(p, 0.5, 0.2), 24)
    quads = extract_quads(grid, FlexParams.zeros(grid.num_cells))
    report = check_topology(split_final(quads), self_intersect=False)
    assert report.is_watertight
    assert report.euler == 0
    assert check_topology(extract_mc_baseline(grid), self_intersect=False).euler == 0


def test_mc_baseline_plane():
    grid = ScalarGrid.from_sdf(lambda p: p[:, 0] - 0.5, 3, origin=(0.0, 0.0, 0.0), spacing=1 / 3)
    mesh = extract_mc_baseline(grid)
    assert not mesh.is_empty
    assert (mesh.vertices[:, 0] - 0.5).abs().max().item() < 1e-12


def crossing_centroids(grid: ScalarGrid, quads: QuadMesh) -> np.ndarray:
    """Centroid of the plain linear crossings owned by each dual vertex"""
    x = deformed_positions(grid).detach().numpy()
    s = grid.sdf.detach().numpy()
    v0, v1 = quads.crossing_edge[:, 0], quads.crossing_edge[:, 1]
    t = (s[v0] / (s[v0] - s[v1]))[:, None]
    crossings = x[v0] + t * (x[v1] - x[v0])
    owner = quads.crossing_vertex.numpy()
    sums = np.zeros((quads.vertices.shape[0], 3))
    np.add.at(sums, owner, crossings)
    return sums / np.bincount(owner)[:, None]


def test_unit_weights_reduce_to_crossing_centroids(sphere_grid):
    quads = extract_quads(sphere_grid, FlexParams.zeros(sphere_grid.num_cells))
    assert np.abs(quads.vertices.numpy() - crossing_centroids(sphere_grid, quads)).max() < 1e-12


@pytest.mark.slow
def test_unit_weights_reduce_to_crossing_centroids_on_random_grids(rng):
    for _ in range(50):
        grid = closed_random_grid(8, rng)
        quads = extract_quads(grid, FlexParams.zeros(grid.num_cells))
        assert np.abs(quads.vertices.numpy() - crossing_centroids(grid, quads)).max() < 1e-12


def test_random_grids_are_manifold(rng):
    for _ in range(5):
        grid = closed_random_grid(8, rng)
        quads = extract_quads(grid, FlexParams.zeros(grid.num_cells))
        report = check_topology(split_final(quads), self_intersect=False)
        assert report.nonmanifold_edges == 0
        assert report.nonmanifold_vertices == 0
        assert report.boundary_edges == 0


@pytest.mark.slow
def test_random_grids_are_manifold_fuzz(rng):
    tables = build_tables()
    for trial in range(500):
        grid = closed_random_grid(8, rng)
        quads = extract_quads(grid, FlexParams.zeros(grid.num_cells), tables)
        report = check_topology(split_final(quads), self_intersect=False)
        assert (report.nonmanifold_edges, report.nonmanifold_vertices, report.boundary_edges) == (0, 0, 0), trial


def block_grid(blocks: int, rng: np.random.Generator) -> ScalarGrid:
    """Independent random 3x3x3 vertex blocks (2x2x2 cells each) separated by outside planes"""
    resolution = 4 * blocks
    sdf = rng.uniform(-1.0, 1.0, (resolution + 1,) * 3)
    separator = np.arange(resolution + 1) % 4 == 0
    sdf[separator, :, :] = sdf[:, separator, :] = sdf[:, :, separator] = 1.0
    return ScalarGrid((resolution,) * 3, (0.0, 0.0, 0.0), 1.0, torch.from_numpy(sdf.reshape(-1)))


@pytest.mark.slow
def test_random_blocks_are_manifold(rng):
    tables = build_tables()
    patterns = 0
    while patterns < 100_000:
        grid = block_grid(20, rng)
        quads = extract_quads(grid, FlexParams.zeros(grid.num_cells), tables)
        report = check_topology(split_final(quads), self_intersect=False)
        assert report.nonmanifold_edges == 0
        assert report.nonmanifold_vertices == 0
        assert report.boundary_edges == 0
        patterns += 20**3


def test_dual_vertices_stay_in_their_cells(rng, generator):
    grid = closed_random_grid(6, rng)
    grid.deform_raw = torch.from_numpy(rng.standard_normal((grid.num_vertices, 3)))
    params = FlexParams.random(grid.num_cells, generator)
    quads = extract_quads(grid, params)
    x = deformed_positions(grid).numpy()
    corners = cell_corners(grid)
    picked = rng.choice(quads.vertices.shape[0], size=min(40, quads.vertices.shape[0]), replace=False)
    for v in picked.tolist():
        inside, margin = point_in_hull(quads.vertices[v].detach().numpy(), x[corners[quads.vertex_cell[v]]])
        assert inside, f"Vertex {v} is {-margin} outside its cell"


@pytest.mark.slow
def test_dual_vertices_stay_in_their_cells_fuzz(rng, generator):
    tables = build_tables()
    checked = 0
    while checked < 100_000:
        grid = closed_random_grid(8, rng)
        grid.deform_raw = torch.from_numpy(3.0 * rng.standard_normal((grid.num_vertices, 3)))
        params = FlexParams.random(grid.num_cells, generator, scale=3.0)
        quads = extract_quads(grid, params, tables)
        x = deformed_positions(grid).numpy()
        corners = cell_corners(grid)
        vertices = quads.vertices.detach().numpy()
        for v, cell in enumerate(quads.vertex_cell.tolist()):
            inside, margin = point_in_hull(vertices[v], x[corners[cell]])
            assert inside, f"Vertex {v} is {-margin} outside its cell"
        checked += len(vertices)


def test_crossing_moves_monotonically_with_alpha(rng):
    ratios = np.logspace(-4, 4, 200)
    for s_j in rng.uniform(0.01, 2.0, 20).tolist():
        crossing = edge_crossing((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), -rng.uniform(0.01, 2.0), s_j, ratios, np.ones(200))
        u = crossing[:, 0].numpy()
        assert ((u > 0) & (u < 1)).all()
        assert (np.diff(u) > 0).all()


def test_dual_vertex_approaches_a_crossing_as_its_beta_grows(rng):
    crossings = rng.uniform(-1.0, 1.0, (5, 3))
    betas = np.ones((100, 5))
    betas[:, 0] = np.logspace(-3, 3, 100)
    distance = np.linalg.norm(dual_vertex(crossings, betas).numpy() - crossings[0], axis=1)
    assert (np.diff(distance) < 0).all()


def cut_edges(grid: ScalarGrid) -> set:
    edges = grid_edges(grid)
    inside = inside_mask(grid.sdf)
    return {tuple(sorted(e)) for e in edges[inside[edges[:, 0]] != inside[edges[:, 1]]].tolist()}


@pytest.mark.slow
def test_marching_cubes_and_flexible_extraction_agree(rng, generator):
    tables = build_tables()
    for _ in range(50):
        grid = closed_random_grid(8, rng)
        quads = extract_quads(grid, FlexParams.random(grid.num_cells, generator), tables)
        mc = extract_mc_baseline(grid, tables)
        cut = cut_edges(grid)
        # One quad per cut edge, one marching cubes vertex per cut edge
        assert {tuple(sorted(e)) for e in quads.crossing_edge.tolist()} == cut
        assert quads.quads.shape[0] == len(cut) == mc.vertices.shape[0]
        flexible = check_topology(split_final(quads), self_intersect=False)
        baseline = check_topology(mc, self_intersect=False)
        assert (flexible.euler, flexible.components) == (baseline.euler, baseline.components)


def test_scene_parameter_groups(sphere_grid):
    assert list(Scene(sphere_grid).parameters()) == ["sdf", "deform_raw", "alpha_raw", "beta_raw", "gamma_raw"]
    assert list(Scene(sphere_grid, method="mc").parameters()) == ["sdf", "deform_raw"]
    quads, mesh = Scene(sphere_grid, method="mc").extract()
    assert quads is None
    assert not mesh.is_empty


def test_topology_ignores_flexible_weights(sphere_grid, generator):
    plain = extract_quads(sphere_grid, FlexParams.zeros(sphere_grid.num_cells))
    flexed = extract_quads(sphere_grid, FlexParams.random(sphere_grid.num_cells, generator))
    assert torch.equal(plain.quads, flexed.quads)
    assert not torch.equal(plain.vertices, flexed.vertices)
