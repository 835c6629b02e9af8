"""Direct SVF fitting by gradient descent through the flow.

Each stage optimises the node vectors of one velocity grid so that the
template, flowed through it, matches a target surface. Gradients are the
exact discrete adjoint of the RK4 (or Euler) integrator and of trilinear
sampling, with Chamfer nearest-neighbour assignments held fixed within an
iteration.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import FitDivergenceError, IntegrationError, MeshflowError, ValidationError
from .flow import IntegrationConfig, RecurrentPipeline, accumulated_prefixes, integrate_points
from .mesh import TriangleMesh, manifold_check, surface_area
from .metrics import SurfaceComparison, compare_surfaces
from .objective import (
    EdgeLossSpec,
    LossReport,
    LossWeights,
    adaptive_target_edge,
    edge_length_loss_gradient,
    nearest_neighbors,
    total_loss,
)
from .svf import VelocityField, grid_for_box, trilinear_weights, zero_field

log = logging.getLogger(__name__)

TARGETS = ("white", "pial")


@dataclass(frozen=True)
class StageSpec:
    """One recurrence: grid resolution, iteration budget and Adam step size.

    ``step_size=None`` falls back to ``FitConfig.base_step``.
    """

    label: str
    target: str = "white"
    dims: tuple = (32, 32, 32)
    iterations: int = 500
    step_size: float | None = None

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValidationError(f"stage target must be one of {TARGETS}, got {self.target!r}")
        if int(self.iterations) < 1:
            raise ValidationError(f"stage {self.label}: iteration budget must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValidationError(f"stage {self.label}: step size must be positive")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValidationError(f"stage {self.label}: grid dims must be three integers >= 2")
        object.__setattr__(self, "dims", dims)


def default_stage_plan(iterations=(300, 200), step_sizes=(2e-2, 1e-3),
                       dims=((32, 32, 32), (64, 64, 64))) -> tuple:
    """Two white recurrences followed by two pial recurrences, coarse then fine."""
    plan = []
    for target in TARGETS:
        for i in range(2):
            plan.append(StageSpec(f"{target}-{i + 1}", target, dims[i], iterations[i], step_sizes[i]))
    return tuple(plan)


@dataclass(frozen=True)
class FitConfig:
    stage_plan: tuple = field(default_factory=default_stage_plan)
    base_step: float = 1e-4
    weights: LossWeights = LossWeights()
    smoothness_weight: float = 0.1
    integration: IntegrationConfig = IntegrationConfig()
    seed: int = 0
    # standard deviation of the random initial node vectors (0: start from zero)
    init_noise: float = 0.0
    # grid box padding as a fraction of the largest extent of the meshes
    margin: float = 0.15
    patience: int = 50
    min_improvement: float = 1e-5
    divergence_factor: float = 10.0
    checkpoint_every: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.base_step > 0:
            raise ValidationError(f"base_step must be positive, got {self.base_step}")
        if not (self.smoothness_weight >= 0 and math.isfinite(self.smoothness_weight)):
            raise ValidationError(f"smoothness_weight must be non-negative, got {self.smoothness_weight}")
        if not self.stage_plan:
            raise ValidationError("stage plan is empty")
        if self.margin < 0:
            raise ValidationError(f"margin must be non-negative, got {self.margin}")

    def step_for(self, stage: StageSpec) -> float:
        return stage.step_size if stage.step_size is not None else self.base_step


@dataclass
class StageResult:
    label: str
    field: VelocityField
    mesh: TriangleMesh
    history: list
    iterations: int
    stopped_early: bool = False


@dataclass
class FitResult:
    pipeline: RecurrentPipeline
    loss_history: dict
    final_metrics: dict
    stages: list
    failed: bool = False
    failure: str | None = None


# -- smoothness penalty ---------------------------------------------------------

@functools.lru_cache(maxsize=8)
def grid_laplacian(dims: tuple) -> sparse.csr_matrix:
    """Index-space graph Laplacian of the node grid (Neumann boundaries)."""
    def path(n):
        if n == 1:
            return sparse.csr_matrix((1, 1))
        main = -2.0 * np.ones(n)
        main[[0, -1]] = -1.0
        off = np.ones(n - 1)
        return sparse.diags([off, main, off], [-1, 0, 1], format="csr")

    ix, iy, iz = (sparse.identity(d, format="csr") for d in dims)
    lx, ly, lz = (path(d) for d in dims)
    return (sparse.kron(lx, sparse.kron(iy, iz)) + sparse.kron(ix, sparse.kron(ly, iz))
            + sparse.kron(ix, sparse.kron(iy, lz))).tocsr()


def smoothness_penalty(field: VelocityField, weight: float):
    """weight * mean over nodes of |Laplacian(V)|^2, and its gradient."""
    if weight == 0:
        return 0.0, np.zeros(field.data.shape)
    L = grid_laplacian(field.dims)
    flat = field.data.reshape(-1, 3)
    lv = L @ flat
    n = flat.shape[0]
    value = weight * float(np.sum(lv * lv)) / n
    grad = (2.0 * weight / n) * (L @ lv)
    return value, grad.reshape(field.data.shape)


# -- forward / reverse ----------------------------------------------------------

def _vjp_position(components, index, dweight, g):
    """Transpose of the sampling Jacobian with respect to position, applied to g.

    ``g`` is (3, n); the result is (3, n).
    """
    s = np.einsum("kcn,kn->cn", components[:, index], g)
    return np.einsum("cn,jcn->jn", s, dweight)


def _flow_backward(field: VelocityField, tape, adjoint, config: IntegrationConfig):
    """Reverse pass: gradient w.r.t. node vectors given dL/d(final positions)."""
    comps = field.components
    h = config.step
    a = np.array(adjoint, dtype=np.float64).T  # (3, n) throughout
    idx_parts, val_parts = [], []

    def stage(y, g):
        index, weight, dweight = trilinear_weights(field, y, gradient=True)
        idx_parts.append(index.ravel())
        val_parts.append((weight[None] * g[:, None, :]).reshape(3, -1))
        return _vjp_position(comps, index, dweight, g)

    for points in reversed(tape):
        if config.method == "euler":
            a = a + stage(points[0], h * a)
            continue
        x, y2, y3, y4 = points
        gk1 = (h / 6) * a
        gk2 = (h / 3) * a
        gk3 = (h / 3) * a
        gk4 = (h / 6) * a
        ax = a.copy()
        gy = stage(y4, gk4)
        ax += gy
        gk3 = gk3 + h * gy
        gy = stage(y3, gk3)
        ax += gy
        gk2 = gk2 + (h / 2) * gy
        gy = stage(y2, gk2)
        ax += gy
        gk1 = gk1 + (h / 2) * gy
        ax += stage(x, gk1)
        a = ax

    n = field.n_nodes
    grad = np.zeros((n, 3))
    if idx_parts:
        idx = np.concatenate(idx_parts)
        vals = np.concatenate(val_parts, axis=1)
        for c in range(3):
            grad[:, c] = np.bincount(idx, weights=vals[c], minlength=n)
    return grad.reshape(field.data.shape)


@dataclass
class FitProblem:
    """Fixed ingredients of one stage's objective."""

    source: TriangleMesh
    target: TriangleMesh
    edge_spec: EdgeLossSpec
    weights: LossWeights = LossWeights()
    integration: IntegrationConfig = IntegrationConfig()
    smoothness_weight: float = 0.0
    segmentation: float = 0.0

    def __post_init__(self):
        self._target_tree = cKDTree(self.target.vertices)

    def evaluate(self, field: VelocityField, with_gradient: bool = True):
        """Loss report, and gradient w.r.t. ``field.data`` when requested."""
        tape = [] if with_gradient else None
        x = integrate_points(field, self.source.vertices, self.integration, tape)
        q = self.target.vertices
        idx_pq, d2_pq = nearest_neighbors(x, q, self._target_tree)
        idx_qp, d2_qp = nearest_neighbors(q, x)
        cd = float(d2_pq.mean() + d2_qp.mean())
        mu = self.edge_spec.target_edge_length
        edge, g_edge = edge_length_loss_gradient(x, self.source.edges, mu)
        reg, g_reg = smoothness_penalty(field, self.smoothness_weight)
        report = total_loss(cd, edge, self.segmentation, self.weights, reg)
        if not with_gradient:
            return report, None
        g = (2.0 / len(x)) * (x - q[idx_pq])
        back = (2.0 / len(q)) * (x[idx_qp] - q)
        for c in range(3):
            g[:, c] += np.bincount(idx_qp, weights=back[:, c], minlength=len(x))
        g += self.weights.lambda1 * g_edge
        grad = _flow_backward(field, tape, g, self.integration) + g_reg
        if not np.all(np.isfinite(grad)):
            node = np.argwhere(~np.isfinite(grad))[0][:3]
            raise MeshflowError(f"non-finite gradient at node {tuple(node.tolist())}")
        return report, grad


def loss_gradient(field: VelocityField, source: TriangleMesh, target: TriangleMesh,
                  spec: EdgeLossSpec, weights: LossWeights = LossWeights(),
                  integration: IntegrationConfig = IntegrationConfig(),
                  smoothness_weight: float = 0.0) -> np.ndarray:
    """Gradient of chamfer + lambda1*edge + smoothness w.r.t. every node vector."""
    problem = FitProblem(source, target, spec, weights, integration, smoothness_weight)
    return problem.evaluate(field)[1]


def loss_value(field: VelocityField, source: TriangleMesh, target: TriangleMesh,
               spec: EdgeLossSpec, weights: LossWeights = LossWeights(),
               integration: IntegrationConfig = IntegrationConfig(),
               smoothness_weight: float = 0.0) -> float:
    problem = FitProblem(source, target, spec, weights, integration, smoothness_weight)
    return problem.evaluate(field, with_gradient=False)[0].objective


# -- optimisation -----------------------------------------------------------------

class Adam:
    def __init__(self, shape, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def fitting_box(meshes, margin: float):
    lo = np.min([m.vertices.min(axis=0) for m in meshes], axis=0)
    hi = np.max([m.vertices.max(axis=0) for m in meshes], axis=0)
    pad = margin * float(np.max(hi - lo))
    return lo - pad, hi + pad


def fit_stage(source: TriangleMesh, target: TriangleMesh, stage: StageSpec,
              config: FitConfig = FitConfig(), box=None, checkpoint=None) -> StageResult:
    """Optimise one velocity grid taking ``source`` towards ``target``.

    The edge-length target is the adaptive value from the target area and
    the source face count. Returns the best iterate seen (lowest objective).
    Stops early when the objective improves by less than
    ``config.min_improvement`` (relative) over ``config.patience`` iterations;
    raises :class:`FitDivergenceError` when it exceeds
    ``config.divergence_factor`` times its initial value.
    """
    if not manifold_check(source).is_closed:
        raise ValidationError(f"stage {stage.label}: source must be a closed manifold mesh")
    if box is None:
        box = fitting_box([source, target], config.margin)
    origin, spacing = grid_for_box(box[0], box[1], stage.dims)
    mu = adaptive_target_edge(surface_area(target), source.n_faces)
    problem = FitProblem(source, target, EdgeLossSpec(mu, "adaptive"), config.weights,
                         config.integration, config.smoothness_weight)

    rng = np.random.default_rng(config.seed)
    params = np.zeros(tuple(stage.dims) + (3,))
    if config.init_noise > 0:
        params = config.init_noise * rng.standard_normal(params.shape)
    base = zero_field(stage.dims, origin, spacing)
    opt = Adam(params.shape, config.step_for(stage), config.adam_betas, config.adam_eps)

    history = []
    best_obj, best_params = math.inf, params
    stopped_early = False
    iterations = int(stage.iterations)
    it = 0
    for it in range(iterations):
        current = base.with_data(params)
        try:
            report, grad = problem.evaluate(current)
        except IntegrationError as exc:
            raise FitDivergenceError(f"stage {stage.label}: {exc}", history, stage.label) from exc
        history.append(report)
        obj = report.objective
        if obj < best_obj:
            best_obj, best_params = obj, params
        if not math.isfinite(obj) or obj > config.divergence_factor * history[0].objective:
            raise FitDivergenceError(
                f"stage {stage.label}: objective {obj:.6g} exceeds {config.divergence_factor}x "
                f"initial {history[0].objective:.6g} at iteration {it}", history, stage.label)
        if checkpoint is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            checkpoint(stage.label, it, current)
        if it >= config.patience:
            ref = history[it - config.patience].objective
            # a zero objective cannot improve further
            if ref <= 0 or (ref - obj) / ref < config.min_improvement:
                stopped_early = True
                break
        if it + 1 < iterations:
            params = opt.step(params, grad)
        if it % 50 == 0:
            log.debug("%s it=%d cd=%.3e edge=%.3e reg=%.3e", stage.label, it,
                      report.chamfer, report.edge, report.regularizer)
    field = base.with_data(best_params)
    mesh = source.with_vertices(integrate_points(field, source.vertices, config.integration))
    log.info("%s: %d iterations, best objective %.4e (initial %.4e)", stage.label, it + 1,
             best_obj, history[0].objective)
    return StageResult(stage.label, field, mesh, history, it + 1, stopped_early)


def fit_recurrent(template: TriangleMesh, white_target: TriangleMesh, pial_target: TriangleMesh,
                  config: FitConfig = FitConfig(), checkpoint=None) -> FitResult:
    """Fit the stage plan in order; pial stages start from the frozen white result.

    All stage grids span one shared box around the template and both targets.
    A diverging stage ends the run; the stages completed so far are returned
    with ``failed=True``.
    """
    targets = {"white": white_target, "pial": pial_target}
    box = fitting_box([template, white_target, pial_target], config.margin)
    current = template
    stages: list[StageResult] = []
    failure = None
    for spec in config.stage_plan:
        try:
            result = fit_stage(current, targets[spec.target], spec, config, box, checkpoint)
        except FitDivergenceError as exc:
            failure = str(exc)
            log.warning("stopping after failed stage %s: %s", spec.label, exc)
            break
        stages.append(result)
        current = result.mesh
    fields = [s.field for s in stages]
    pipeline = RecurrentPipeline(template, fields, [s.mesh for s in stages],
                                 [s.label for s in stages], accumulated_prefixes(fields))
    metrics = {}
    for spec, s in zip(config.stage_plan, stages):
        metrics[s.label] = compare_surfaces(s.mesh, targets[spec.target])
    return FitResult(pipeline, {s.label: s.history for s in stages}, metrics, stages,
                     failed=failure is not None, failure=failure)


def single_stage_config(config: FitConfig, dims=(32, 32, 32), iterations=500, step_size=None,
                        target="white") -> FitConfig:
    return replace(config, stage_plan=(StageSpec(f"{target}-1", target, dims, iterations, step_size),))
