"""
Fitting loop: extract, evaluate the weighted objective, differentiate, step Adam.

Every iteration draws its samples from a generator seeded with
(seed, iteration), so a run resumed from a checkpoint repeats the
uninterrupted run. After the main fit an optional second phase ramps the
edge-length regularizer up from zero; octree runs alternate fitting rounds
with refinement of the leaves whose running loss is above a threshold.
"""
import csv
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import arrow
import numpy as np
import torch

from .diff import NonFiniteError, Tape, backward
from .extract import FlexParams, Method, QuadMesh, Scene, TriMesh
from .grid import ScalarGrid
from .logger import log_exec_details, logger
from .metrics import METRIC_SAMPLES, MetricReport, metrics
from .objectives import (
    SDF_SAMPLES,
    SURFACE_SAMPLES,
    LossWeights,
    loss_dev,
    loss_sdf,
    loss_sign,
    reg_developable,
    reg_edge,
    surface_point_terms,
)
from .octree import Octree, remap_params
from .targets import TargetShape, load_target

CHECKPOINT_VERSION = 1
INIT_RADIUS = 0.5
EMPTY_PATIENCE = 10
CELL_LOSS_DECAY = 0.9
REFINE_THRESHOLD = 0.04
EDGE_PHASE_STEPS = 300
# Sampling stream of the final metrics, apart from every iteration stream
METRICS_STREAM = 2**32 - 1
LOSS_TERMS = ("sdf", "accuracy", "completeness", "dev", "sign", "edge", "developable")
CSV_FIELDS = ("iteration", "phase", "w_sign", "w_edge") + LOSS_TERMS + ("total",)


class FitAborted(Exception):
    def __init__(self, reason: str, checkpoint: Optional[str] = None):
        super().__init__(reason)
        self.reason = reason
        self.checkpoint = checkpoint


@dataclass
class FitConfig:
    iterations: int = 1000
    lr: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    resolution: int = 32
    target: str = "builtin:sphere"
    rotate: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    method: Method = "flexicubes"
    edge_phase_steps: int = 0
    octree_depth: int = 0
    octree_threshold: float = REFINE_THRESHOLD
    sdf_samples: int = SDF_SAMPLES
    surface_samples: int = SURFACE_SAMPLES
    metric_samples: int = METRIC_SAMPLES
    empty_patience: int = EMPTY_PATIENCE
    checkpoint_every: int = 0

    def __post_init__(self):
        checks = {
            f"iterations must be >= 0, got {self.iterations}": self.iterations >= 0,
            f"Learning rate must be positive, got {self.lr}": self.lr > 0,
            f"Resolution must be >= 1, got {self.resolution}": self.resolution >= 1,
            f"edge_phase_steps must be >= 0, got {self.edge_phase_steps}": self.edge_phase_steps >= 0,
            f"Octree depth must be >= 0, got {self.octree_depth}": self.octree_depth >= 0,
            f"Unknown extraction method {self.method}": self.method in ("flexicubes", "mc"),
            "Octree fitting needs the flexicubes method": not self.octree_depth or self.method == "flexicubes",
        }
        for message, ok in checks.items():
            if not ok:
                raise ValueError(message)
        self.betas = tuple(float(b) for b in self.betas)  # type: ignore
        self.rotate = tuple(float(r) for r in self.rotate)  # type: ignore

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "FitConfig":
        """Keys as in a run configuration file; `weights` and `octree` are nested mappings"""
        values = dict(values)
        weights = LossWeights.from_dict(values.pop("weights", None) or {})
        octree = values.pop("octree", None) or {}
        if "depth" in octree:
            values["octree_depth"] = int(octree["depth"])
        if "threshold" in octree:
            values["octree_threshold"] = float(octree["threshold"])
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"Unknown run configuration keys: {sorted(unknown)}")
        return cls(weights=weights, **values)

    def as_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["betas"] = list(self.betas)
        values["rotate"] = list(self.rotate)
        return values


@dataclass
class FitState:
    scene: Scene
    optimizer: torch.optim.Adam
    iteration: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    cell_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    empty_streak: int = 0

    @property
    def grid(self):
        return self.scene.grid

    @property
    def params(self) -> FlexParams:
        return self.scene.params


@dataclass
class FitResult:
    state: FitState
    mesh: TriMesh
    quads: Optional[QuadMesh]
    metrics: Optional[MetricReport]


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def initial_scene(config: FitConfig) -> Scene:
    """Sphere of radius INIT_RADIUS, all raw flexible weights and deformations at zero"""
    grid = ScalarGrid.sphere(config.resolution, INIT_RADIUS)
    if config.octree_depth:
        grid = Octree.from_grid(grid, config.octree_depth)
    return Scene(grid, method=config.method)


def make_optimizer(scene: Scene, config: FitConfig) -> torch.optim.Adam:
    scene.requires_grad_(True)
    return torch.optim.Adam(list(scene.parameters().values()), lr=config.lr, betas=config.betas, eps=config.eps)


def new_state(config: FitConfig) -> FitState:
    scene = initial_scene(config)
    return FitState(scene, make_optimizer(scene, config), cell_loss=np.full(scene.grid.num_cells, np.nan))


def objective(
    scene: Scene,
    target: TargetShape,
    weights: LossWeights,
    rng: np.random.Generator,
    w_sign: float,
    w_edge: float = 0.0,
    sdf_samples: int = SDF_SAMPLES,
    surface_samples: int = SURFACE_SAMPLES,
) -> Tuple[torch.Tensor, Dict[str, float], Optional[QuadMesh], TriMesh]:
    """Weighted total, the unweighted terms, and the meshes it was evaluated on"""
    quads, mesh = scene.extract()
    accuracy, completeness = surface_point_terms(mesh, target, rng, surface_samples)
    terms = {
        "sdf": loss_sdf(mesh, target, rng, sdf_samples),
        "accuracy": accuracy,
        "completeness": completeness,
        "dev": loss_dev(quads),
        "sign": loss_sign(scene.grid),
        "edge": reg_edge(mesh),
        "developable": reg_developable(mesh) if weights.developable else torch.zeros((), dtype=accuracy.dtype),
    }
    total = (
        weights.sdf * terms["sdf"]
        + weights.depth * terms["accuracy"]
        + weights.mask * terms["completeness"]
        + weights.dev * terms["dev"]
        + w_sign * terms["sign"]
        + w_edge * terms["edge"]
        + weights.developable * terms["developable"]
    )
    return total, {name: float(value) for name, value in terms.items()}, quads, mesh


def scene_loss(target: TargetShape, config: FitConfig, seed: int = 0):
    """Full objective as a deterministic function of the scene, for gradient checks"""

    def loss(scene: Scene) -> torch.Tensor:
        rng = np.random.default_rng(seed)
        w_sign = config.weights.sign_weight(0, config.iterations)
        return objective(scene, target, config.weights, rng, w_sign, 0.0, config.sdf_samples, config.surface_samples)[0]

    return loss


def _observe_cells(state: FitState, mesh: TriMesh, target: TargetShape) -> None:
    """Running average per leaf of the distance from its dual vertices to the target"""
    if mesh.vertex_cell is None or mesh.is_empty:
        return
    cells = mesh.vertex_cell
    valid = cells >= 0
    with torch.no_grad():
        distance = target.distance(mesh.vertices.detach()[torch.from_numpy(valid)]).numpy()
    num_cells = len(state.cell_loss)
    sums = np.bincount(cells[valid], weights=distance, minlength=num_cells)
    counts = np.bincount(cells[valid], minlength=num_cells)
    seen = counts > 0
    current = sums[seen] / counts[seen]
    previous = state.cell_loss[seen]
    state.cell_loss[seen] = np.where(
        np.isnan(previous), current, CELL_LOSS_DECAY * previous + (1 - CELL_LOSS_DECAY) * current
    )


def step(state: FitState, target: TargetShape, config: FitConfig, w_edge: float = 0.0, phase: int = 1) -> float:
    """One optimizer step; raises FitAborted before touching the parameters"""
    rng = iteration_rng(config.seed, state.iteration)
    w_sign = config.weights.sign_weight(state.iteration, config.iterations)
    state.optimizer.zero_grad()
    total, terms, _, mesh = objective(
        state.scene, target, config.weights, rng, w_sign, w_edge, config.sdf_samples, config.surface_samples
    )

    state.empty_streak = state.empty_streak + 1 if mesh.is_empty else 0
    if state.empty_streak > config.empty_patience:
        raise FitAborted(f"Extraction was empty for {state.empty_streak} consecutive iterations")
    try:
        tape = Tape.from_scene(state.scene)
        gradients = backward(total, tape)
    except NonFiniteError as e:
        raise FitAborted(f"Non-finite values at iteration {state.iteration}: {e}") from e
    for name, tensor in tape.groups.items():
        tensor.grad = gradients[name]
    state.optimizer.step()

    if isinstance(state.scene.grid, Octree):
        _observe_cells(state, mesh, target)
    record = {"iteration": state.iteration, "phase": phase, "w_sign": w_sign, "w_edge": w_edge}
    record.update(terms)
    record["total"] = float(total)
    state.history.append(record)
    logger.debug(f"Iteration {state.iteration}: loss {record['total']:.6g}")
    state.iteration += 1
    return record["total"]


def run(
    state: FitState,
    target: TargetShape,
    config: FitConfig,
    iterations: int,
    edge_ramp: bool = False,
    out_dir: Optional[str] = None,
) -> FitState:
    """`iterations` steps; with `edge_ramp` the edge weight climbs linearly from 0 to its ceiling"""
    for j in range(iterations):
        w_edge = config.weights.edge * j / max(iterations - 1, 1) if edge_ramp else 0.0
        try:
            step(state, target, config, w_edge, phase=2 if edge_ramp else 1)
        except FitAborted as e:
            if out_dir:
                e.checkpoint = save_checkpoint(state, config, f"{out_dir}/checkpoint.pt")
            raise
        if out_dir and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(state, config, f"{out_dir}/checkpoint.pt")
    return state


def refine_and_continue(
    state: FitState,
    target: TargetShape,
    config: FitConfig,
    threshold: Optional[float] = None,
    iterations: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> FitState:
    """
    Splits the leaves whose running loss is above `threshold`, restarts Adam
    on the new parameters and fits for `iterations` more steps. Leaves the
    state untouched when nothing is split.
    """
    tree = state.scene.grid
    if not isinstance(tree, Octree):
        raise ValueError("Refinement needs an octree scene")
    threshold = config.octree_threshold if threshold is None else threshold
    iterations = config.iterations if iterations is None else iterations
    chosen = np.nonzero(np.nan_to_num(state.cell_loss, nan=-np.inf) > threshold)[0]
    if not len(chosen):
        logger.info(f"No leaf above loss {threshold}, nothing to refine")
        return state
    origin = tree.subdivide(chosen.tolist())
    if (origin[:, 1] == 0).all():
        return state

    kept = origin[:, 1] == 0
    cell_loss = np.where(kept, state.cell_loss[origin[:, 0]], np.nan)
    scene = Scene(tree, remap_params(state.scene.params, origin), state.scene.tables, state.scene.method)
    refined = FitState(scene, make_optimizer(scene, config), state.iteration, state.history, cell_loss)
    return run(refined, target, config, iterations, out_dir=out_dir)


def _grid_record(grid) -> Dict[str, Any]:
    if isinstance(grid, ScalarGrid):
        return {"kind": "uniform", **grid.to_snapshot()}
    return {
        "kind": "octree",
        "base_resolution": grid.base_resolution.tolist(),
        "origin": grid.origin.tolist(),
        "spacing": grid.spacing,
        "max_depth": grid.max_depth,
        "leaves": [list(leaf) for leaf in grid.leaves],
        "vertex_keys": grid.vertex_keys.tolist(),
        "sdf": grid.sdf.detach().clone(),
        "deform_raw": grid.deform_raw.detach().clone(),
    }


def _grid_from_record(record: Dict[str, Any]):
    record = dict(record)
    if record.pop("kind") == "uniform":
        return ScalarGrid.from_snapshot(record)
    return Octree(
        record["base_resolution"],
        record["origin"],
        record["spacing"],
        record["max_depth"],
        [tuple(leaf) for leaf in record["leaves"]],
        np.array(record["vertex_keys"], dtype=np.int64),
        record["sdf"],
        record["deform_raw"],
    )


def save_checkpoint(state: FitState, config: FitConfig, path: str) -> str:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "created": arrow.utcnow().isoformat(),
            "config": config.as_dict(),
            "grid": _grid_record(state.scene.grid),
            "params": {k: v.detach().clone() for k, v in state.scene.params.parameters().items()},
            "method": state.scene.method,
            "optimizer": state.optimizer.state_dict(),
            "iteration": state.iteration,
            "history": state.history,
            "cell_loss": state.cell_loss,
            "empty_streak": state.empty_streak,
        },
        path,
    )
    logger.debug(f"Checkpoint at iteration {state.iteration} written to {path}")
    return path


def load_checkpoint(path: str) -> Tuple[FitState, FitConfig]:
    record = torch.load(path, weights_only=False)
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {record.get('version')}")
    config = FitConfig.from_dict(record["config"])
    params = FlexParams(**{k: v.clone() for k, v in record["params"].items()})
    scene = Scene(_grid_from_record(record["grid"]), params, method=record["method"])
    optimizer = make_optimizer(scene, config)
    optimizer.load_state_dict(record["optimizer"])
    state = FitState(
        scene,
        optimizer,
        record["iteration"],
        list(record["history"]),
        np.asarray(record["cell_loss"], dtype=float),
        record["empty_streak"],
    )
    logger.debug(f"Loaded checkpoint from {record['created']} at iteration {state.iteration}")
    return state, config


def write_loss_csv(history: List[Dict[str, float]], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for record in history:
            writer.writerow({k: record[k] for k in CSV_FIELDS})


def read_loss_csv(path: str) -> List[Dict[str, float]]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def fit(config: FitConfig, target: Optional[TargetShape] = None, out_dir: Optional[str] = None) -> FitResult:
    target = target or load_target(config.target, config.rotate, config.scale)
    state = new_state(config)
    logger.info(f"🔨 Fitting {target.name} with {config.method} at {config.resolution}^3")
    start = time.perf_counter()

    run(state, target, config, config.iterations, out_dir=out_dir)
    for _ in range(config.octree_depth):
        state = refine_and_continue(state, target, config, out_dir=out_dir)
    if config.edge_phase_steps:
        logger.info(f"🔨 Ramping the edge regularizer over {config.edge_phase_steps} steps")
        run(state, target, config, config.edge_phase_steps, edge_ramp=True, out_dir=out_dir)

    with torch.no_grad():
        quads = None if config.method == "mc" else state.scene.extract()[0]
        mesh = state.scene.final_mesh().detach()
    report = None
    if config.metric_samples and not mesh.is_empty:
        report = metrics(mesh, target, np.random.default_rng([config.seed, METRICS_STREAM]), config.metric_samples)

    if out_dir:
        write_loss_csv(state.history, f"{out_dir}/loss.csv")
        save_checkpoint(state, config, f"{out_dir}/checkpoint.pt")
    duration = time.perf_counter() - start
    log_exec_details(f"fit ({config.method})", target.name, duration)
    logger.info(f"✅ Fitted {target.name} in {duration:.2f}s, {len(mesh.faces)} triangles")
    return FitResult(state, mesh, quads, report)
