"""Fixed-step integration of vertex trajectories through stationary velocity fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationError, ValidationError
from .mesh import TriangleMesh, manifold_check
from .svf import VelocityField, accumulate, resample, sample

METHODS = ("rk4", "euler")


@dataclass(frozen=True)
class IntegrationConfig:
    step_count: int = 30
    method: str = "rk4"
    time_horizon: float = 1.0

    def __post_init__(self):
        if int(self.step_count) != self.step_count or self.step_count < 1:
            raise ValidationError(f"step_count must be a positive integer, got {self.step_count}")
        if not (self.time_horizon > 0 and math.isfinite(self.time_horizon)):
            raise ValidationError(f"time_horizon must be positive, got {self.time_horizon}")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")

    @property
    def step(self) -> float:
        return self.time_horizon / self.step_count


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        vertex = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
        raise IntegrationError(
            f"non-finite state at step {step} (vertex {vertex})", step=step, vertex=vertex)


def integrate_points(field: VelocityField, points, config: IntegrationConfig = IntegrationConfig(),
                     tape: list | None = None) -> np.ndarray:
    """Flow (n, 3) points through ``field`` over ``[0, time_horizon]``.

    If ``tape`` is a list, the stage evaluation points of every step are
    appended to it (one (s, n, 3) array per step, ``s`` = 4 for RK4 and 1 for
    Euler) for use by the reverse pass.
    """
    x = np.array(points, dtype=np.float64).reshape(-1, 3)
    _check_finite(x, 0)
    h = config.step
    # overflow is reported through the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, config.step_count + 1):
            if config.method == "euler":
                if tape is not None:
                    tape.append(x[None].copy())
                x = x + h * sample(field, x)
            else:
                k1 = sample(field, x)
                y2 = x + (h / 2) * k1
                k2 = sample(field, y2)
                y3 = x + (h / 2) * k2
                k3 = sample(field, y3)
                y4 = x + h * k3
                k4 = sample(field, y4)
                if tape is not None:
                    tape.append(np.stack([x, y2, y3, y4]))
                x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            _check_finite(x, step)
    return x


def integrate_point(field: VelocityField, x0, config: IntegrationConfig = IntegrationConfig()) -> np.ndarray:
    """Position at the end of the time horizon of the trajectory starting at ``x0``."""
    return integrate_points(field, np.asarray(x0, dtype=np.float64)[None], config)[0]


def deform_mesh(mesh: TriangleMesh, field: VelocityField,
                config: IntegrationConfig = IntegrationConfig()) -> TriangleMesh:
    """Move every vertex along its trajectory; faces are kept as-is."""
    return mesh.with_vertices(integrate_points(field, mesh.vertices, config))


def default_stage_labels(n: int) -> list[str]:
    if n == 4:
        return ["white-1", "white-2", "pial-1", "pial-2"]
    return [f"stage-{i + 1}" for i in range(n)]


@dataclass
class RecurrentPipeline:
    """Template, per-stage fields and the mesh produced after each stage.

    ``accumulated[i]`` is the voxel-wise sum of ``stages[0..i]`` on the
    finest grid among the stages.
    """

    template: TriangleMesh
    stages: list
    outputs: list
    stage_labels: list
    accumulated: list = field(default_factory=list)

    @property
    def final(self) -> TriangleMesh:
        return self.outputs[-1] if self.outputs else self.template


def _same_box(a: VelocityField, b: VelocityField) -> bool:
    scale = max(float(np.max(np.abs(a.max_corner - a.origin))), 1.0)
    return (np.allclose(a.origin, b.origin, rtol=0, atol=1e-9 * scale)
            and np.allclose(a.max_corner, b.max_corner, rtol=0, atol=1e-9 * scale))


def accumulated_prefixes(stages) -> list:
    """Running sums of stage fields, resampled to the finest grid if grids differ."""
    if not stages:
        return []
    finest = max(stages, key=lambda f: f.n_nodes)
    same = [f if f.same_geometry(finest) else resample(f, finest.dims, finest.origin, finest.spacing)
            for f in stages]
    out = [same[0]]
    for f in same[1:]:
        out.append(accumulate([out[-1], f]))
    return out


def check_pipeline_geometry(stages) -> None:
    for i, f in enumerate(stages[1:], start=1):
        if not _same_box(stages[0], f):
            raise ValidationError(
                f"stage {i} field spans a different box than stage 0 "
                f"({f.origin.tolist()}..{f.max_corner.tolist()} vs "
                f"{stages[0].origin.tolist()}..{stages[0].max_corner.tolist()})")


def run_pipeline(template: TriangleMesh, stages, config: IntegrationConfig = IntegrationConfig(),
                 stage_labels=None) -> RecurrentPipeline:
    """Apply each stage field in order, starting from the template.

    Fields must span the same world box; their resolutions may differ.
    """
    stages = list(stages)
    report = manifold_check(template)
    if not report.is_closed:
        raise ValidationError("template must be a closed manifold mesh")
    check_pipeline_geometry(stages)
    labels = list(stage_labels) if stage_labels is not None else default_stage_labels(len(stages))
    if len(labels) != len(stages):
        raise ValidationError(f"{len(labels)} labels for {len(stages)} stages")
    outputs = []
    current = template
    for i, f in enumerate(stages):
        try:
            current = deform_mesh(current, f, config)
        except IntegrationError as exc:
            raise IntegrationError(f"stage {i} ({labels[i]}): {exc}", step=exc.step,
                                   vertex=exc.vertex, stage=i) from exc
        outputs.append(current)
    return RecurrentPipeline(template, stages, outputs, labels, accumulated_prefixes(stages))
