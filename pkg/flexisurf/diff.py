"""
Reverse-mode gradients of scene losses, and their finite-difference check.

The tape is torch's autograd graph; `Tape` pins which leaf tensors are the
parameter groups and in which order they are reported.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .extract import FlexParams, Scene
from .grid import ScalarGrid
from .logger import logger

GROUPS = ("sdf", "deform_raw", "alpha_raw", "beta_raw", "gamma_raw")
FD_STEP = 1e-5
PER_GROUP = 20
LIVE_GRADIENT = 1e-6

LossFn = Callable[[Scene], torch.Tensor]


class NonFiniteError(ArithmeticError):
    def __init__(self, message: str, groups: Sequence[str] = ()):
        super().__init__(message)
        self.groups = list(groups)


@dataclass
class Tape:
    """Parameter groups of one forward pass, keyed by their stable names"""

    groups: Dict[str, torch.Tensor]

    @classmethod
    def from_scene(cls, scene: Scene) -> "Tape":
        parameters = scene.parameters()
        groups = {name: parameters[name] for name in GROUPS if name in parameters}
        for tensor in groups.values():
            tensor.requires_grad_(True)
        return cls(groups)

    def names(self) -> List[str]:
        return list(self.groups)


def backward(loss: torch.Tensor, tape: Tape) -> Dict[str, torch.Tensor]:
    """One gradient per registered group; groups the loss does not reach get zeros"""
    if not bool(torch.isfinite(loss).all()):
        raise NonFiniteError(f"Refusing to differentiate a non-finite loss ({loss.item()})", tape.names())
    tensors = list(tape.groups.values())
    if not loss.requires_grad:
        return {name: torch.zeros_like(t) for name, t in tape.groups.items()}
    gradients = torch.autograd.grad(loss, tensors, allow_unused=True)
    result = {
        name: torch.zeros_like(t) if g is None else g for (name, t), g in zip(tape.groups.items(), gradients)
    }
    broken = [name for name, g in result.items() if not bool(torch.isfinite(g).all())]
    if broken:
        raise NonFiniteError(f"Non-finite gradients in {broken}", broken)
    return result


@dataclass
class GroupReport:
    max_rel_err: float = 0.0
    grad_norm: float = 0.0
    checked: int = 0
    live: int = 0


@dataclass
class GradReport:
    step: float
    trials: int
    groups: Dict[str, GroupReport] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups.values()), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance

    def merge(self, other: "GradReport") -> None:
        for name, group in other.groups.items():
            mine = self.groups.setdefault(name, GroupReport())
            mine.max_rel_err = max(mine.max_rel_err, group.max_rel_err)
            mine.grad_norm = max(mine.grad_norm, group.grad_norm)
            mine.checked += group.checked
            mine.live += group.live
        self.trials += other.trials

    def to_json(self) -> str:
        return json.dumps({"max_rel_err": self.max_rel_err, **asdict(self)}, indent=2)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _pick_indices(gradient: np.ndarray, values: np.ndarray, name: str, count: int, rng: np.random.Generator):
    """Prefer entries with a clear gradient, then top up with entries the loss does not reach"""
    eligible = np.ones(gradient.size, dtype=bool)
    if name == "sdf":
        # A step must not flip the sign of a grid value
        eligible &= np.abs(values) > 10 * FD_STEP
    live = np.nonzero(eligible & (np.abs(gradient) > LIVE_GRADIENT))[0]
    dead = np.nonzero(eligible & (gradient == 0))[0]
    chosen = rng.choice(live, size=min(count, len(live)), replace=False) if len(live) else np.zeros(0, dtype=np.int64)
    missing = count - len(chosen)
    if missing > 0 and len(dead):
        chosen = np.concatenate([chosen, rng.choice(dead, size=min(missing, len(dead)), replace=False)])
    return chosen.astype(np.int64), min(count, len(live))


def grad_check(
    scene: Scene,
    loss_fn: LossFn,
    step: float = FD_STEP,
    trials: int = 1,
    per_group: int = PER_GROUP,
    rng: Optional[np.random.Generator] = None,
) -> GradReport:
    """
    Central differences on sampled entries of every group. `loss_fn` must be
    a deterministic function of the scene parameters.
    """
    rng = rng or np.random.default_rng(0)
    report = GradReport(step=step, trials=0)
    for _ in range(trials):
        tape = Tape.from_scene(scene)
        gradients = backward(loss_fn(scene), tape)
        trial = GradReport(step=step, trials=1)
        for name, tensor in tape.groups.items():
            gradient = gradients[name].reshape(-1).numpy()
            flat = tensor.detach().view(-1)
            indices, live = _pick_indices(gradient, flat.numpy(), name, per_group, rng)
            group = GroupReport(grad_norm=float(np.linalg.norm(gradient)), checked=len(indices), live=live)
            for index in indices.tolist():
                with torch.no_grad():
                    original = float(flat[index])
                    flat[index] = original + step
                    plus = float(loss_fn(scene))
                    flat[index] = original - step
                    minus = float(loss_fn(scene))
                    flat[index] = original
                numeric = (plus - minus) / (2 * step)
                group.max_rel_err = max(group.max_rel_err, relative_error(float(gradient[index]), numeric))
            trial.groups[name] = group
        logger.debug(f"Gradient check trial: max relative error {trial.max_rel_err:.3g}")
        report.merge(trial)
    return report


def random_scene(resolution: int, rng: np.random.Generator, scale: float = 0.5) -> Scene:
    """Values uniform in [-1, 1], raw deformations and flexible weights normal with std `scale`"""
    shape = (resolution,) * 3
    grid = ScalarGrid(shape, (-1.0, -1.0, -1.0), 2.0 / resolution, torch.zeros((resolution + 1) ** 3))
    grid.sdf = torch.from_numpy(rng.uniform(-1.0, 1.0, grid.num_vertices))
    grid.deform_raw = torch.from_numpy(scale * rng.standard_normal((grid.num_vertices, 3)))
    cells = grid.num_cells
    params = FlexParams(
        torch.from_numpy(scale * rng.standard_normal((cells, 8))),
        torch.from_numpy(scale * rng.standard_normal((cells, 12))),
        torch.from_numpy(scale * rng.standard_normal(cells)),
    )
    return Scene(grid, params)
