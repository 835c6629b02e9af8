"""Synthetic target surfaces standing in for segmented cortical data.

Every fixture is a radial graph over an icosphere, so vertex ``i`` of each
output sits on the ray through template vertex ``i``. A radial graph with
positive radius never self-intersects, which is what the parameter checks
below rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mesh import TriangleMesh, icosphere
from .objective import VoxelGrid

KINDS = ("ellipsoid", "bumpy-sphere", "dimpled-sphere", "nested-white-pial")

# maximum of sin^2(t) cos(t), so the bump pattern peaks at +-1
_BUMP_PEAK = 2.0 / (3.0 * math.sqrt(3.0))

DEFAULTS = {
    "ellipsoid": {"level": 4, "axes": (1.3, 1.0, 0.8), "jitter": 0.0},
    "bumpy-sphere": {"level": 4, "radius": 1.0, "amplitude": 0.15, "jitter": 0.0},
    "dimpled-sphere": {"level": 4, "radius": 1.0, "depth": 0.3, "width": 0.4, "jitter": 0.0},
    "nested-white-pial": {"level": 4, "axes": (1.3, 1.0, 0.8), "gap": 0.08, "scale": None,
                          "jitter": 0.0, "labels_dims": None},
}


@dataclass
class Fixture:
    kind: str
    meshes: dict
    params: dict
    labels: VoxelGrid | None = None
    seed: int = 0

    def __getitem__(self, name):
        return self.meshes[name]


def bump_pattern(directions: np.ndarray) -> np.ndarray:
    """Eight-lobed real harmonic sin^2(t) cos(t) cos(2p), scaled to peak at 1."""
    d = np.asarray(directions, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    # sin^2(t) cos(2p) = x^2 - y^2 on the unit sphere
    return (x * x - y * y) * z / _BUMP_PEAK


def _radial(template: TriangleMesh, radius: np.ndarray, what: str) -> TriangleMesh:
    if not np.all(radius > 0):
        raise ValidationError(f"{what}: parameters give a non-positive radius "
                              f"(min {float(radius.min()):.4g}); the surface would fold through its centre")
    d = template.vertices / np.linalg.norm(template.vertices, axis=1)[:, None]
    return template.with_vertices(d * radius[:, None])


def _jittered(mesh: TriangleMesh, jitter: float, rng) -> TriangleMesh:
    """Random radial perturbation of relative size ``jitter``."""
    if jitter == 0:
        return mesh
    if not 0 <= jitter < 0.1:
        raise ValidationError(f"jitter must lie in [0, 0.1), got {jitter}")
    scale = 1.0 + jitter * rng.uniform(-1.0, 1.0, mesh.n_vertices)
    return mesh.with_vertices(mesh.vertices * scale[:, None])


def ellipsoid_radius(directions, axes) -> np.ndarray:
    a = np.asarray(axes, dtype=np.float64)
    return 1.0 / np.sqrt(((directions / a) ** 2).sum(axis=1))


def thomsen_area(axes, p: float = 1.6075) -> float:
    """Thomsen's approximation of the ellipsoid surface area (about 1% worst case)."""
    a, b, c = (float(v) for v in axes)
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0) ** (1.0 / p)


def _params(kind, params):
    if kind not in KINDS:
        raise ValidationError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    merged = dict(DEFAULTS[kind])
    for key, value in (params or {}).items():
        if key not in merged:
            raise ValidationError(f"unknown parameter {key!r} for fixture {kind!r}")
        merged[key] = value
    return merged


def synthesize_fixture(kind: str, params: dict | None = None, seed: int = 0) -> Fixture:
    """Build a fixture; the same kind, params and seed always give identical meshes.

    Output mesh names: ``surface`` for the single-surface kinds, ``white`` and
    ``pial`` for ``nested-white-pial``.
    """
    p = _params(kind, params)
    rng = np.random.default_rng(seed)
    template = icosphere(int(p["level"]))
    d = template.vertices / np.linalg.norm(template.vertices, axis=1)[:, None]

    if kind == "ellipsoid":
        axes = np.asarray(p["axes"], dtype=np.float64)
        if axes.shape != (3,) or not np.all(axes > 0):
            raise ValidationError(f"ellipsoid axes must be three positive numbers, got {p['axes']}")
        mesh = _radial(template, ellipsoid_radius(d, axes), kind)
        return Fixture(kind, {"surface": _jittered(mesh, p["jitter"], rng)}, p, seed=seed)

    if kind == "bumpy-sphere":
        r = p["radius"] * (1.0 + p["amplitude"] * bump_pattern(d))
        mesh = _radial(template, r, kind)
        return Fixture(kind, {"surface": _jittered(mesh, p["jitter"], rng)}, p, seed=seed)

    if kind == "dimpled-sphere":
        if not p["width"] > 0:
            raise ValidationError(f"dimple width must be positive, got {p['width']}")
        angle = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
        r = p["radius"] * (1.0 - p["depth"] * np.exp(-angle ** 2 / (2.0 * p["width"] ** 2)))
        mesh = _radial(template, r, kind)
        return Fixture(kind, {"surface": _jittered(mesh, p["jitter"], rng)}, p, seed=seed)

    return _nested(template, d, p, rng, seed)


def _nested(template, d, p, rng, seed):
    from .metrics import point_to_surface

    axes = np.asarray(p["axes"], dtype=np.float64)
    gap = float(p["gap"])
    if axes.shape != (3,) or not np.all(axes > 0):
        raise ValidationError(f"white axes must be three positive numbers, got {p['axes']}")
    if not gap > 0:
        raise ValidationError(f"gap must be positive, got {gap}")
    white = _jittered(_radial(template, ellipsoid_radius(d, axes), "white"), p["jitter"], rng)
    scale = p["scale"]
    if scale is None:
        # the thinnest shell of a scaled ellipsoid is along its shortest axis
        scale = 1.0 + 1.05 * gap / float(axes.min())
    if not scale > 1:
        raise ValidationError(f"pial scale must exceed 1, got {scale}")
    pial = white.with_vertices(white.vertices * scale)
    achieved = min(float(point_to_surface(white.vertices, pial).min()),
                   float(point_to_surface(pial.vertices, white).min()))
    if achieved < gap:
        raise ValidationError(f"nested fixture gap {achieved:.4g} is below the requested {gap:.4g}; "
                              f"increase scale or lower gap")
    out = dict(p, scale=float(scale), achieved_gap=achieved)
    labels = None
    if p["labels_dims"] is not None:
        labels = nested_labels(axes, float(scale), p["labels_dims"])
    return Fixture("nested-white-pial", {"white": white, "pial": pial}, out, labels, seed)


def nested_labels(axes, scale, dims) -> VoxelGrid:
    """Label volume: 0 outside pial, 1 between white and pial, 2 inside white."""
    dims = tuple(int(v) for v in dims)
    hi = np.asarray(axes, dtype=np.float64) * scale * 1.1
    origin = -hi
    spacing = 2 * hi / (np.array(dims) - 1)
    axes_grid = [origin[i] + spacing[i] * np.arange(dims[i]) for i in range(3)]
    x = np.stack(np.meshgrid(*axes_grid, indexing="ij"), axis=-1)
    q = ((x / np.asarray(axes)) ** 2).sum(axis=-1)
    labels = np.where(q <= 1.0, 2, np.where(q <= scale * scale, 1, 0))
    return VoxelGrid(dims, origin, spacing, labels, "labels")
