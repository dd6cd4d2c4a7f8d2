import numpy as np
import pytest
import torch

from flexisurf.meshcheck import check_topology, self_intersections
from flexisurf.octree import Octree
from flexisurf.optimize import (
    CSV_FIELDS,
    FitAborted,
    FitConfig,
    fit,
    load_checkpoint,
    new_state,
    read_loss_csv,
    refine_and_continue,
    run,
    save_checkpoint,
    write_loss_csv,
)
from flexisurf.targets import BUILTINS, builtin_target

SMALL = dict(resolution=8, sdf_samples=100, surface_samples=100, metric_samples=0)


def totals(history):
    return [record["total"] for record in history]


def test_fit_config():
    config = FitConfig()
    assert (config.iterations, config.lr, config.resolution) == (1000, 0.01, 32)
    config = FitConfig.from_dict({"iterations": 5, "weights": {"sdf": 10}, "octree": {"depth": 2, "threshold": 0.1}})
    assert (config.iterations, config.weights.sdf, config.octree_depth, config.octree_threshold) == (5, 10.0, 2, 0.1)
    assert FitConfig.from_dict(config.as_dict()) == config

    with pytest.raises(ValueError) as excinfo:
        FitConfig.from_dict({"resolutoin": 16})
    assert "resolutoin" in str(excinfo.value)
    with pytest.raises(ValueError):
        FitConfig(method="mc", octree_depth=1)
    with pytest.raises(ValueError):
        FitConfig(method="dc")
    with pytest.raises(ValueError):
        FitConfig(lr=0.0)


def test_fit_is_deterministic():
    config = FitConfig(iterations=3, **SMALL)
    target = builtin_target("box")
    first = fit(config, target)
    second = fit(config, target)
    assert totals(first.state.history) == pytest.approx(totals(second.state.history), rel=1e-12)
    assert torch.equal(first.mesh.vertices, second.mesh.vertices)
    assert first.metrics is None
    assert first.quads is not None


def test_resume_from_checkpoint(tmp_path):
    config = FitConfig(iterations=4, **SMALL)
    target = builtin_target("box")
    straight = run(new_state(config), target, config, 4)

    state = run(new_state(config), target, config, 2)
    path = save_checkpoint(state, config, str(tmp_path / "checkpoint.pt"))
    resumed, loaded = load_checkpoint(path)
    assert loaded == config
    assert resumed.iteration == 2
    run(resumed, target, loaded, 2)
    assert totals(resumed.history) == pytest.approx(totals(straight.history), rel=1e-12)


def test_sign_weight_schedule(tmp_path):
    config = FitConfig(iterations=5, edge_phase_steps=3, **SMALL)
    result = fit(config, builtin_target("box"), str(tmp_path))
    history = read_loss_csv(str(tmp_path / "loss.csv"))
    assert list(history[0]) == list(CSV_FIELDS)
    assert [r["w_sign"] for r in history[:5]] == pytest.approx(np.linspace(0.2, 0.01, 5).tolist())
    assert [r["phase"] for r in history] == [1.0] * 5 + [2.0] * 3
    assert [r["w_edge"] for r in history[5:]] == pytest.approx([0.0, 50.0, 100.0])
    assert [r["iteration"] for r in history] == list(range(8))
    assert len(result.state.history) == 8
    assert (tmp_path / "checkpoint.pt").exists()


def test_loss_csv(tmp_path):
    record = {name: float(i) for i, name in enumerate(CSV_FIELDS)}
    write_loss_csv([record, record], str(tmp_path / "loss.csv"))
    assert read_loss_csv(str(tmp_path / "loss.csv")) == [record, record]


def test_abort_on_empty_extraction(tmp_path):
    config = FitConfig(iterations=10, empty_patience=2, **SMALL)
    state = new_state(config)
    with torch.no_grad():
        state.scene.grid.sdf.fill_(1.0)
    with pytest.raises(FitAborted) as excinfo:
        run(state, builtin_target("sphere"), config, 10, out_dir=str(tmp_path))
    assert "empty" in excinfo.value.reason
    assert state.iteration == 2
    assert excinfo.value.checkpoint == f"{tmp_path}/checkpoint.pt"
    assert load_checkpoint(excinfo.value.checkpoint)[0].empty_streak == 3


def test_refine(tmp_path):
    config = FitConfig(iterations=2, octree_depth=1, **SMALL)
    target = builtin_target("box")
    state = run(new_state(config), target, config, 2)
    tree = state.scene.grid
    assert isinstance(tree, Octree)
    assert np.isfinite(state.cell_loss).any()

    assert refine_and_continue(state, target, config, threshold=np.inf) is state
    leaves = len(tree.leaves)
    refined = refine_and_continue(state, target, config, threshold=0.0, iterations=1)
    assert len(refined.scene.grid.leaves) > leaves
    assert refined.scene.params.num_cells == refined.scene.grid.num_cells
    assert refined.iteration == 3

    path = save_checkpoint(refined, config, str(tmp_path / "checkpoint.pt"))
    resumed, _ = load_checkpoint(path)
    assert resumed.scene.grid.leaves == refined.scene.grid.leaves

    with pytest.raises(ValueError):
        refine_and_continue(new_state(FitConfig(iterations=1, **SMALL)), target, config)


@pytest.mark.slow
def test_octree_fit_is_watertight():
    config = FitConfig(iterations=20, octree_depth=1, octree_threshold=0.0, **SMALL)
    result = fit(config, builtin_target("sphere"))
    report = check_topology(result.mesh)
    assert report.boundary_edges == 0
    assert report.nonmanifold_edges == 0


@pytest.mark.slow
def test_sharp_features_beat_marching_cubes():
    base = dict(
        iterations=500, resolution=32, target="builtin:box", rotate=(22.5, 22.5, 0.0), metric_samples=100_000
    )
    flexi = fit(FitConfig(method="flexicubes", **base)).metrics
    mc = fit(FitConfig(method="mc", **base)).metrics
    assert flexi.cd <= 0.5 * mc.cd
    assert flexi.ecd < mc.ecd


@pytest.mark.slow
def test_edge_phase_improves_triangles():
    base = dict(iterations=300, resolution=32, target="builtin:box", rotate=(22.5, 22.5, 0.0))
    plain = fit(FitConfig(**base)).metrics
    ramped = fit(FitConfig(edge_phase_steps=300, **base)).metrics
    assert ramped.min_angle_lt10_pct <= 0.5 * plain.min_angle_lt10_pct
    assert ramped.cd < 2 * plain.cd


@pytest.mark.slow
def test_builtin_suite_rarely_self_intersects():
    intersecting, total = 0, 0
    for name in sorted(BUILTINS):
        result = fit(FitConfig(iterations=500, resolution=32, target=f"builtin:{name}", metric_samples=0))
        vertices, faces = result.mesh.numpy()
        intersecting += len(np.unique(self_intersections(vertices, faces)))
        total += len(faces)
    assert 100.0 * intersecting / total <= 0.5
