"""Stationary velocity fields on regular 3D grids.

Node ``(i, j, k)`` sits at ``origin + (i*sx, j*sy, k*sz)``. Sampling is
trilinear in world coordinates and clamps to the grid boundary outside it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ValidationError

FIELD_KINDS = ("zero", "translation", "rigid-rotation", "radial", "gaussian-bump")

# grid coordinates this close to an integer are snapped onto the node
_NODE_SNAP = 1e-9

_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


def _check_geometry(dims, origin, spacing):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValidationError(f"dims must be three positive integers, got {dims}")
    origin = np.array(origin, dtype=np.float64).reshape(3)
    spacing = np.array(spacing, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(origin)):
        raise ValidationError(f"origin must be finite, got {origin.tolist()}")
    if not np.all(spacing > 0) or not np.all(np.isfinite(spacing)):
        raise ValidationError(f"spacing must be positive on every axis, got {spacing.tolist()}")
    return dims, origin, spacing


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Dense grid of 3-vectors (mm per unit time); ``data`` has shape (nx, ny, nz, 3)."""

    dims: tuple
    origin: np.ndarray
    spacing: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        dims, origin, spacing = _check_geometry(self.dims, self.origin, self.spacing)
        data = np.array(self.data, dtype=np.float64)
        if data.size != dims[0] * dims[1] * dims[2] * 3:
            raise ValidationError(
                f"data holds {data.size // 3} vectors, expected {dims[0] * dims[1] * dims[2]}")
        data = data.reshape(dims + (3,))
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ValidationError(f"non-finite velocity at node {tuple(bad[:3].tolist())}")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @property
    def n_nodes(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin + (np.array(self.dims) - 1) * self.spacing

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @cached_property
    def components(self) -> np.ndarray:
        """Node vectors as a contiguous (3, n_nodes) array, one row per axis."""
        return np.ascontiguousarray(self.data.reshape(-1, 3).T)

    def with_data(self, data) -> "VelocityField":
        return VelocityField(self.dims, self.origin, self.spacing, data)

    def negate(self) -> "VelocityField":
        return self.with_data(-self.data)

    def same_geometry(self, other: "VelocityField") -> bool:
        return _geometry_mismatch(self, other) is None


def _geometry_mismatch(a, b):
    if a.dims != b.dims:
        return "dims"
    if not np.array_equal(a.origin, b.origin):
        return "origin"
    if not np.array_equal(a.spacing, b.spacing):
        return "spacing"
    return None


def zero_field(dims, origin=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0)) -> VelocityField:
    dims, origin, spacing = _check_geometry(dims, origin, spacing)
    return VelocityField(dims, origin, spacing, np.zeros(dims + (3,)))


def grid_for_box(lower, upper, dims):
    """Origin and spacing of a grid whose corner nodes sit on ``lower``/``upper``."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    d = np.asarray(dims, dtype=np.float64)
    extent = upper - lower
    if np.any(extent <= 0):
        raise ValidationError(f"empty box {lower.tolist()} .. {upper.tolist()}")
    spacing = extent / np.maximum(d - 1, 1)
    return lower.copy(), spacing


def trilinear_weights(field: VelocityField, points, gradient: bool = False):
    """Corner node indices and weights for trilinear sampling.

    Returns ``(index, weight)`` with shapes (8, n), corner-major, where
    ``index`` is the flat node index into ``data.reshape(-1, 3)``. With
    ``gradient=True`` also returns ``dweight`` (3, 8, n): derivatives of the
    weights with respect to world x, y and z; axes on which the point is
    clamped contribute zero.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.array(field.dims)
    g = (p - field.origin) / field.spacing
    r = np.rint(g)
    g = np.where(np.abs(g - r) < _NODE_SNAP, r, g)
    upper = dims - 1
    gc = np.minimum(np.maximum(g, 0), upper)
    i0 = np.minimum(np.floor(gc).astype(np.int64), np.maximum(upper - 1, 0))
    t = np.ascontiguousarray((gc - i0).T)  # (3, n)

    nx, ny, nz = field.dims
    step = (dims > 1).astype(np.int64)
    offsets = ((_CORNERS[:, 0] * step[0] * ny + _CORNERS[:, 1] * step[1]) * nz
               + _CORNERS[:, 2] * step[2])
    index = offsets[:, None] + ((i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2])

    # per-axis factor is 1 - t for the lower corner and t for the upper one
    c = _CORNERS.T.astype(np.float64)[:, :, None]  # (3, 8, 1)
    f = (1.0 - t[:, None, :]) + (2.0 * t[:, None, :] - 1.0) * c  # (3, 8, n)
    fyz = f[1] * f[2]
    weight = f[0] * fyz
    if not gradient:
        return index, weight

    inside = (g >= 0) & (g <= upper) & (dims > 1)
    scale = np.where(inside, 1.0 / field.spacing, 0.0).T  # (3, n)
    sign = 2.0 * c - 1.0
    dweight = np.empty((3,) + weight.shape)
    dweight[0] = sign[0] * fyz * scale[0]
    dweight[1] = sign[1] * (f[0] * f[2]) * scale[1]
    dweight[2] = sign[2] * (f[0] * f[1]) * scale[2]
    return index, weight, dweight


def sample(field: VelocityField, points) -> np.ndarray:
    """Trilinearly interpolated velocity at world point(s).

    A single point of shape (3,) gives a (3,) vector; (n, 3) gives (n, 3).
    """
    pts = np.asarray(points, dtype=np.float64)
    index, weight = trilinear_weights(field, pts)
    vals = field.components[:, index]  # (3, 8, n)
    out = (vals * weight).sum(axis=1).T
    return out[0] if pts.ndim == 1 else out


def accumulate(fields) -> VelocityField:
    """Voxel-wise sum of fields sharing one grid."""
    fields = list(fields)
    if not fields:
        raise ValidationError("accumulate needs at least one field")
    first = fields[0]
    total = np.array(first.data)
    for i, f in enumerate(fields[1:], start=1):
        bad = _geometry_mismatch(first, f)
        if bad is not None:
            raise ValidationError(f"field {i} differs from field 0 in {bad}")
        total += f.data
    return first.with_data(total)


def resample(field: VelocityField, dims, origin=None, spacing=None) -> VelocityField:
    """Evaluate ``field`` at the nodes of another grid (same box by default)."""
    if origin is None or spacing is None:
        origin, spacing = grid_for_box(field.origin, field.max_corner, dims)
    target = zero_field(dims, origin, spacing)
    values = sample(field, target.node_positions().reshape(-1, 3))
    return target.with_data(values)


@dataclass(frozen=True)
class FieldSpec:
    """Analytic velocity field description.

    ``vector`` is the translation velocity for ``translation``, the angular
    velocity for ``rigid-rotation`` and the peak velocity for
    ``gaussian-bump``; ``rate`` is the expansion rate for ``radial``.
    """

    kind: str
    vector: tuple = (0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0, 0.0)
    rate: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValidationError(f"unknown field kind {self.kind!r}; expected one of {FIELD_KINDS}")
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.shape != (3,) or not np.all(np.isfinite(vec)):
            raise ValidationError(f"vector must be a finite 3-vector, got {self.vector!r}")
        if np.asarray(self.center, dtype=np.float64).shape != (3,):
            raise ValidationError(f"center must be a 3-vector, got {self.center!r}")
        if self.kind == "rigid-rotation" and not np.any(vec):
            raise ValidationError("rigid-rotation needs a nonzero angular velocity")
        if self.kind == "radial" and not np.isfinite(self.rate):
            raise ValidationError(f"radial rate must be finite, got {self.rate}")
        if self.kind == "gaussian-bump" and not self.width > 0:
            raise ValidationError(f"gaussian-bump width must be positive, got {self.width}")

    def evaluate(self, points) -> np.ndarray:
        """Analytic velocity at (n, 3) points."""
        x = np.asarray(points, dtype=np.float64)
        vec = np.asarray(self.vector, dtype=np.float64)
        rel = x - np.asarray(self.center, dtype=np.float64)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "translation":
            return np.broadcast_to(vec, x.shape).copy()
        if self.kind == "rigid-rotation":
            return np.cross(vec, rel)
        if self.kind == "radial":
            return self.rate * rel
        r2 = np.sum(rel * rel, axis=-1, keepdims=True)
        return vec * np.exp(-r2 / (2.0 * self.width ** 2))


def synthesize(spec: FieldSpec, dims, origin, spacing) -> VelocityField:
    """Sample an analytic field at every grid node."""
    base = zero_field(dims, origin, spacing)
    if spec.kind == "zero":
        return base
    return base.with_data(spec.evaluate(base.node_positions()))
