"""Training objective: Chamfer, adaptive edge-length and segmentation losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _parallel
from .errors import ValidationError
from .mesh import TriangleMesh

# clamp for probabilities inside the log of the cross-entropy
PROB_EPS = 1e-7
DICE_SMOOTH = 1e-6

# neighbours inspected per query to resolve exact distance ties
_TIE_CANDIDATES = 8


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1e-3

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class LossReport:
    """Loss terms; ``total`` is chamfer + lambda1*edge + lambda2*segmentation.

    ``regularizer`` holds any artifact-specific penalty (the SVF smoothness
    term during fitting) and is kept out of ``total``.
    """

    chamfer: float
    edge: float
    segmentation: float
    total: float
    regularizer: float = 0.0

    @property
    def objective(self) -> float:
        return self.total + self.regularizer

    def as_dict(self) -> dict:
        return {"chamfer": self.chamfer, "edge": self.edge, "segmentation": self.segmentation,
                "total": self.total, "regularizer": self.regularizer}


@dataclass(frozen=True)
class EdgeLossSpec:
    target_edge_length: float
    source: str = "fixed"

    def __post_init__(self):
        if not (self.target_edge_length > 0 and math.isfinite(self.target_edge_length)):
            raise ValidationError(f"target edge length must be positive, got {self.target_edge_length}")
        if self.source not in ("fixed", "adaptive"):
            raise ValidationError(f"source must be 'fixed' or 'adaptive', got {self.source!r}")

    @classmethod
    def adaptive(cls, ground_truth_area: float, template_face_count: int) -> "EdgeLossSpec":
        return cls(adaptive_target_edge(ground_truth_area, template_face_count), "adaptive")

    @classmethod
    def fixed(cls, length: float) -> "EdgeLossSpec":
        return cls(float(length), "fixed")


def _points(x) -> np.ndarray:
    if isinstance(x, TriangleMesh):
        return x.vertices
    p = np.asarray(x, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(-1, 3)
    return p


def nearest_neighbors(queries, points, tree: cKDTree | None = None):
    """Index of and squared distance to the nearest of ``points`` for each query.

    Exact ties go to the lowest index. Squared distances are recomputed
    directly from the coordinates so they match a brute-force evaluation.
    """
    q = _points(queries)
    p = _points(points)
    if len(p) == 0 or len(q) == 0:
        raise ValidationError("nearest-neighbour query on an empty point set")
    if tree is None:
        tree = cKDTree(p)
    idx, d2 = _candidates(q, p, tree, min(2, len(p)))
    best_idx, best = _pick(idx, d2)
    if len(p) > 2:
        # rows whose two nearest are (nearly) tied get a wider candidate set
        maybe = np.flatnonzero(d2.max(axis=1) <= best * (1 + 1e-9) + 1e-300)
        if maybe.size:
            wide_idx, wide_d2 = _candidates(q[maybe], p, tree, min(_TIE_CANDIDATES, len(p)))
            best_idx[maybe], best[maybe] = _pick(wide_idx, wide_d2)
    return best_idx, best


def _candidates(q, p, tree, k):
    _, cand = tree.query(q, k=k, workers=_parallel.workers())
    cand = cand.reshape(len(q), k)
    return cand, ((q[:, None, :] - p[cand]) ** 2).sum(axis=-1)


def _pick(cand, d2):
    best = d2.min(axis=1, keepdims=True)
    idx = np.where(d2 == best, cand, np.iinfo(np.int64).max).min(axis=1)
    return idx, best[:, 0]


def chamfer_terms(P, Q):
    """Both directional nearest-neighbour assignments and the Chamfer value.

    Returns ``(loss, idx_pq, d2_pq, idx_qp, d2_qp)`` where ``idx_pq[i]`` is the
    vertex of Q nearest to P[i].
    """
    p, q = _points(P), _points(Q)
    if len(p) == 0 or len(q) == 0:
        raise ValidationError("Chamfer distance of an empty point set")
    idx_pq, d2_pq = nearest_neighbors(p, q)
    idx_qp, d2_qp = nearest_neighbors(q, p)
    return float(d2_pq.mean() + d2_qp.mean()), idx_pq, d2_pq, idx_qp, d2_qp


def chamfer_loss(P, Q) -> float:
    """Symmetric mean squared vertex-to-nearest-vertex distance (mm^2)."""
    return chamfer_terms(P, Q)[0]


def adaptive_target_edge(ground_truth_area: float, template_face_count: int) -> float:
    """Side of an equilateral triangle of area S/N: 2 * sqrt(S / (sqrt(3) N))."""
    S, N = float(ground_truth_area), template_face_count
    if not (S > 0 and math.isfinite(S)):
        raise ValidationError(f"surface area must be positive, got {S}")
    if not N > 0:
        raise ValidationError(f"face count must be positive, got {N}")
    return 2.0 * math.sqrt(S / (math.sqrt(3.0) * N))


def _edge_loss_parts(vertices, edges, n_vertices, mu):
    deg = np.bincount(edges.ravel(), minlength=n_vertices).astype(np.float64)
    if np.any(deg == 0):
        v = int(np.flatnonzero(deg == 0)[0])
        raise ValidationError(f"vertex {v} has no neighbours")
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    length = np.linalg.norm(d, axis=1)
    sq = (mu - length) ** 2
    per_vertex = (np.bincount(edges[:, 0], weights=sq, minlength=n_vertices)
                  + np.bincount(edges[:, 1], weights=sq, minlength=n_vertices)) / deg
    return per_vertex.mean(), deg, d, length


def edge_length_loss(mesh: TriangleMesh, spec: EdgeLossSpec) -> float:
    """Mean over vertices of the mean squared deviation of incident edges from the target."""
    loss, *_ = _edge_loss_parts(mesh.vertices, mesh.edges, mesh.n_vertices, spec.target_edge_length)
    return float(loss)


def edge_length_loss_gradient(vertices, edges, mu):
    """Edge loss and its gradient with respect to (n, 3) vertex positions."""
    n = len(vertices)
    loss, deg, d, length = _edge_loss_parts(vertices, edges, n, mu)
    # each edge enters the neighbourhood means of both endpoints
    w = (1.0 / deg[edges[:, 0]] + 1.0 / deg[edges[:, 1]]) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(length > 0, -2.0 * (mu - length) / length, 0.0) * w
    g_edge = coef[:, None] * d  # d(loss)/d(v1) for edge (v0, v1)
    grad = np.zeros_like(vertices)
    for c in range(3):
        grad[:, c] = (np.bincount(edges[:, 1], weights=g_edge[:, c], minlength=n)
                      - np.bincount(edges[:, 0], weights=g_edge[:, c], minlength=n))
    return float(loss), grad


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Label volume (nx, ny, nz) of ints or probability volume (nx, ny, nz, C)."""

    dims: tuple
    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    kind: str = "labels"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValidationError(f"dims must be three positive integers, got {dims}")
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        if not np.all(spacing > 0):
            raise ValidationError(f"spacing must be positive, got {spacing.tolist()}")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.kind == "labels":
            values = np.asarray(self.values)
            if not np.issubdtype(values.dtype, np.integer):
                raise ValidationError("label volume must hold integers")
            values = values.reshape(dims).astype(np.int64)
            if values.min() < 0:
                raise ValidationError("labels must be non-negative")
        elif self.kind == "probabilities":
            values = np.asarray(self.values, dtype=np.float64)
            values = values.reshape(dims + (-1,))
            if values.min() < 0 or values.max() > 1:
                raise ValidationError("probabilities must lie in [0, 1]")
            err = np.abs(values.sum(axis=-1) - 1.0)
            if err.max() > 1e-5:
                bad = np.unravel_index(int(err.argmax()), dims)
                raise ValidationError(f"probabilities at voxel {bad} sum to {1 + err.max():.6g}, not 1")
        else:
            raise ValidationError(f"kind must be 'labels' or 'probabilities', got {self.kind!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return 1 if self.kind == "labels" else self.values.shape[-1]


def segmentation_terms(prediction: VoxelGrid, truth: VoxelGrid):
    """Mean voxel cross-entropy and mean soft-Dice loss over foreground classes."""
    if prediction.kind != "probabilities" or truth.kind != "labels":
        raise ValidationError("expected a probability prediction and a label truth")
    if prediction.dims != truth.dims:
        raise ValidationError(f"dims mismatch: {prediction.dims} vs {truth.dims}")
    probs = prediction.values.reshape(-1, prediction.channels)
    labels = truth.values.reshape(-1)
    C = probs.shape[1]
    if labels.max() >= C:
        raise ValidationError(f"label {int(labels.max())} outside {C} prediction channels")
    picked = probs[np.arange(len(labels)), labels]
    ce = float(-np.log(np.clip(picked, PROB_EPS, 1.0)).mean())
    if C < 2:
        return ce, 0.0
    dice_losses = []
    for c in range(1, C):
        y = (labels == c).astype(np.float64)
        p = probs[:, c]
        dice = (2.0 * np.sum(p * y) + DICE_SMOOTH) / (np.sum(p) + np.sum(y) + DICE_SMOOTH)
        dice_losses.append(1.0 - dice)
    return ce, float(np.mean(dice_losses))


def segmentation_loss(prediction: VoxelGrid, truth: VoxelGrid,
                      ce_weight: float = 1.0, dice_weight: float = 1.0) -> float:
    ce, dice = segmentation_terms(prediction, truth)
    return ce_weight * ce + dice_weight * dice


def total_loss(chamfer: float, edge: float, segmentation: float,
               weights: LossWeights = LossWeights(), regularizer: float = 0.0) -> LossReport:
    vals = (chamfer, edge, segmentation)
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"non-finite loss term in {vals}")
    total = chamfer + weights.lambda1 * edge + weights.lambda2 * segmentation
    return LossReport(float(chamfer), float(edge), float(segmentation), float(total), float(regularizer))
