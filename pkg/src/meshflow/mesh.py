"""Triangle meshes: storage, icosphere templates, topology and differential quantities."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .errors import ResourceLimitError, ValidationError

MAX_SUBDIVISION_LEVEL = 8

# Faces below this area (mm^2) are degenerate for curvature purposes.
DEGENERATE_AREA = 1e-12
# Cotangent weights of degenerate faces are clipped to +/- this value.
COT_CAP = 1e4

DEFAULT_CONVEXITY_ITERATIONS = 50


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertices (n, 3) in mm and counter-clockwise faces (m, 3).

    Arrays are copied and frozen on construction; deformations produce new
    meshes via :meth:`with_vertices`, which keeps the face array object.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must have shape (m, 3), got {f.shape}")
        if f.size:
            bad = np.flatnonzero((f < 0).any(axis=1) | (f >= len(v)).any(axis=1))
            if bad.size:
                raise ValidationError(
                    f"face {bad[0]} references a vertex outside [0, {len(v)})")
            rep = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                                 | (f[:, 2] == f[:, 0]))
            if rep.size:
                raise ValidationError(f"face {rep[0]} repeats a vertex: {f[rep[0]].tolist()}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @functools.cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, lexicographic order."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    @functools.cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 vertex adjacency built from :attr:`edges`."""
        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same connectivity, new positions."""
        m = TriangleMesh.__new__(TriangleMesh)
        v = np.array(vertices, dtype=np.float64)
        if v.shape != self.vertices.shape:
            raise ValidationError(
                f"vertex array shape {v.shape} does not match mesh {self.vertices.shape}")
        v.setflags(write=False)
        object.__setattr__(m, "vertices", v)
        object.__setattr__(m, "faces", self.faces)
        return m

    def translated(self, offset) -> "TriangleMesh":
        return self.with_vertices(self.vertices + np.asarray(offset, dtype=np.float64))

    def flipped(self) -> "TriangleMesh":
        """Reverse the orientation of every face."""
        return TriangleMesh(self.vertices, self.faces[:, ::-1])


@dataclass(frozen=True, eq=False)
class VertexField:
    """Per-vertex values bound to a mesh by vertex count.

    ``flags`` is an optional boolean array marking vertices where a fallback
    was taken while computing the values.
    """

    values: np.ndarray
    n_vertices: int
    flags: np.ndarray | None = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if len(vals) != self.n_vertices:
            raise ValidationError(
                f"field has {len(vals)} values but is bound to {self.n_vertices} vertices")
        object.__setattr__(self, "values", vals)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.n_vertices

    @classmethod
    def on(cls, mesh: TriangleMesh, values, flags=None) -> "VertexField":
        return cls(np.asarray(values), mesh.n_vertices, flags)

    def check_bound(self, mesh: TriangleMesh) -> None:
        if self.n_vertices != mesh.n_vertices:
            raise ValidationError(
                f"field bound to {self.n_vertices} vertices, mesh has {mesh.n_vertices}")


class ManifoldReport(NamedTuple):
    is_closed: bool
    is_orientable: bool
    euler_characteristic: int
    boundary_edge_count: int
    non_manifold_edge_count: int


class EdgeStats(NamedTuple):
    mean: float
    std: float
    min: float
    max: float


# -- construction -----------------------------------------------------------

_PHI = (1.0 + math.sqrt(5.0)) / 2.0

_ICOSAHEDRON_VERTICES = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
], dtype=np.float64)

_ICOSAHEDRON_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def _subdivide(unit_vertices, faces):
    """One 1-to-4 split; midpoints are pushed back onto the unit sphere."""
    nv = len(unit_vertices)
    nf = len(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mid = unit_vertices[uniq[:, 0]] + unit_vertices[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    m01 = nv + inv[:nf]
    m12 = nv + inv[nf:2 * nf]
    m20 = nv + inv[2 * nf:]
    v0, v1, v2 = faces.T
    new_faces = np.concatenate([
        np.stack([v0, m01, m20], axis=1),
        np.stack([v1, m12, m01], axis=1),
        np.stack([v2, m20, m12], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ])
    return np.concatenate([unit_vertices, mid]), new_faces


def icosphere(subdivision_level: int = 0, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere from a repeatedly subdivided icosahedron.

    Parameters
    ----------
    subdivision_level : int
        Number of 1-to-4 splits, at most ``MAX_SUBDIVISION_LEVEL``.
        Level ``L`` yields ``10 * 4**L + 2`` vertices and ``20 * 4**L`` faces.
    radius : float
        Distance of every vertex from ``center``.
    center : array_like
        Sphere center.

    Returns
    -------
    TriangleMesh
        Closed genus-zero mesh with outward-facing counter-clockwise faces.
    """
    level = int(subdivision_level)
    if level < 0:
        raise ValidationError(f"subdivision level must be non-negative, got {level}")
    if level > MAX_SUBDIVISION_LEVEL:
        raise ResourceLimitError(
            f"subdivision level {level} exceeds the limit of {MAX_SUBDIVISION_LEVEL} "
            f"({10 * 4 ** level + 2} vertices requested)")
    if not radius > 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    v = _ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    f = _ICOSAHEDRON_FACES
    for _ in range(level):
        v, f = _subdivide(v, f)
    return TriangleMesh(v * radius + np.asarray(center, dtype=np.float64), f)


# -- topology ---------------------------------------------------------------

def manifold_check(mesh: TriangleMesh) -> ManifoldReport:
    """Closedness, consistent orientation and Euler characteristic.

    ``is_orientable`` reports whether the faces are *consistently oriented*:
    every edge shared by two faces is traversed once in each direction.
    """
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    uniq, inv, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    boundary = int(np.sum(counts == 1))
    non_manifold = int(np.sum(counts > 2))
    # +1 when the directed edge runs low->high, -1 otherwise; a consistently
    # oriented interior edge sums to zero.
    direction = np.where(directed[:, 0] < directed[:, 1], 1, -1)
    balance = np.bincount(inv, weights=direction, minlength=len(uniq))
    two = counts == 2
    orientable = bool(np.all(balance[two] == 0)) and non_manifold == 0
    chi = int(mesh.n_vertices) - int(len(uniq)) + int(mesh.n_faces)
    return ManifoldReport(
        is_closed=boundary == 0 and non_manifold == 0 and mesh.n_faces > 0,
        is_orientable=orientable,
        euler_characteristic=chi,
        boundary_edge_count=boundary,
        non_manifold_edge_count=non_manifold,
    )


def euler_characteristic(mesh: TriangleMesh) -> int:
    return mesh.n_vertices - len(mesh.edges) + mesh.n_faces


# -- geometry ---------------------------------------------------------------

def face_cross(vertices, faces):
    """Unnormalised face normals (twice the area vector)."""
    a = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - a, vertices[faces[:, 2]] - a)


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh.vertices, mesh.faces), axis=1)


def surface_area(mesh: TriangleMesh) -> float:
    """Total area, sum of |cross| / 2 over faces (mm^2)."""
    return float(face_areas(mesh).sum())


def _vertex_normals(vertices, faces):
    n = len(vertices)
    cross = face_cross(vertices, faces)
    acc = np.zeros((n, 3))
    for k in range(3):
        np.add.at(acc, faces[:, k], cross)
    norm = np.linalg.norm(acc, axis=1)
    flags = np.zeros(n, dtype=bool)
    bad = norm <= 1e-300
    if bad.any():
        # fall back to an unweighted mean of unit face normals
        cn = np.linalg.norm(cross, axis=1, keepdims=True)
        unit = np.divide(cross, cn, out=np.zeros_like(cross), where=cn > 0)
        alt = np.zeros((n, 3))
        for k in range(3):
            np.add.at(alt, faces[:, k], unit)
        acc[bad] = alt[bad]
        norm = np.linalg.norm(acc, axis=1)
        still = norm <= 1e-300
        acc[still] = (0.0, 0.0, 1.0)
        norm[still] = 1.0
        flags = still
    return acc / norm[:, None], flags


def vertex_normals(mesh: TriangleMesh) -> VertexField:
    """Area-weighted unit vertex normals.

    Vertices whose accumulated normal vanishes use the unweighted mean of
    incident unit face normals; if that also vanishes the normal is +z and
    the vertex is flagged in ``VertexField.flags``.
    """
    normals, flags = _vertex_normals(mesh.vertices, mesh.faces)
    return VertexField(normals, mesh.n_vertices, flags)


def _corner_cotangents(vertices, faces):
    """Cotangent of the interior angle at each face corner, shape (m, 3)."""
    p = [vertices[faces[:, k]] for k in range(3)]
    cot = np.empty((len(faces), 3))
    for k in range(3):
        u = p[(k + 1) % 3] - p[k]
        w = p[(k + 2) % 3] - p[k]
        s = np.linalg.norm(np.cross(u, w), axis=1)
        d = np.einsum("ij,ij->i", u, w)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot[:, k] = d / s
    return cot


def cotangent_weights(mesh: TriangleMesh):
    """Per-corner cotangents and a mask of degenerate faces."""
    areas = face_areas(mesh)
    degenerate = areas < DEGENERATE_AREA
    cot = _corner_cotangents(mesh.vertices, mesh.faces)
    if degenerate.any():
        sub = cot[degenerate]
        sub[~np.isfinite(sub)] = 0.0
        cot[degenerate] = np.clip(sub, -COT_CAP, COT_CAP)
    return cot, degenerate


def mixed_voronoi_areas(mesh: TriangleMesh, cot=None) -> np.ndarray:
    """Mixed Voronoi / barycentric vertex areas (Meyer et al. 2003)."""
    v, f = mesh.vertices, mesh.faces
    if cot is None:
        cot, _ = cotangent_weights(mesh)
    areas = face_areas(mesh)
    sq = np.empty((len(f), 3))  # squared length of the edge opposite corner k
    for k in range(3):
        d = v[f[:, (k + 1) % 3]] - v[f[:, (k + 2) % 3]]
        sq[:, k] = np.einsum("ij,ij->i", d, d)
    obtuse = cot < 0
    any_obtuse = obtuse.any(axis=1)
    contrib = np.empty((len(f), 3))
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        # edge k-l is opposite corner j, edge k-j is opposite corner l
        voronoi = (sq[:, j] * cot[:, j] + sq[:, l] * cot[:, l]) / 8.0
        contrib[:, k] = np.where(
            any_obtuse,
            np.where(obtuse[:, k], areas / 2.0, areas / 4.0),
            voronoi,
        )
    out = np.zeros(len(v))
    for k in range(3):
        np.add.at(out, f[:, k], contrib[:, k])
    return out


def laplace_beltrami_vector(mesh: TriangleMesh) -> np.ndarray:
    """Cotangent Laplacian of the vertex positions divided by mixed area.

    Equals ``-2 H n`` on a smooth surface.
    """
    v, f = mesh.vertices, mesh.faces
    cot, _ = cotangent_weights(mesh)
    area = mixed_voronoi_areas(mesh, cot)
    lap = np.zeros_like(v)
    for k in range(3):
        # corner k weights the opposite edge (j, l)
        j, l = f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        w = 0.5 * cot[:, k][:, None]
        d = v[l] - v[j]
        np.add.at(lap, j, w * d)
        np.add.at(lap, l, -w * d)
    with np.errstate(divide="ignore", invalid="ignore"):
        lap = np.where(area[:, None] > 0, lap / area[:, None], 0.0)
    return lap


def mean_curvature(mesh: TriangleMesh) -> VertexField:
    """Signed discrete mean curvature (1/mm), positive on convex regions.

    Magnitude is half the norm of the cotangent Laplacian of the positions
    over mixed Voronoi areas; the sign is opposite to the sign of its
    projection on the vertex normal, so a sphere of radius r gives 1/r.
    """
    lap = laplace_beltrami_vector(mesh)
    normals, _ = _vertex_normals(mesh.vertices, mesh.faces)
    sign = -np.sign(np.einsum("ij,ij->i", lap, normals))
    return VertexField(0.5 * np.linalg.norm(lap, axis=1) * sign, mesh.n_vertices)


def convexity(mesh: TriangleMesh, smoothing_iterations: int = DEFAULT_CONVEXITY_ITERATIONS) -> VertexField:
    """Sulcal-depth proxy (mm): accumulated normal displacement under smoothing.

    Each round moves every vertex to the mean of its neighbours and adds the
    displacement projected on the current vertex normal. Inward-curving
    regions (sulci) move outward and accumulate positive values; convex
    regions (gyri) accumulate negative values.
    """
    iters = int(smoothing_iterations)
    if iters < 0:
        raise ValidationError(f"smoothing_iterations must be non-negative, got {iters}")
    adj = mesh.adjacency
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    x = np.array(mesh.vertices)
    acc = np.zeros(mesh.n_vertices)
    for _ in range(iters):
        normals, _ = _vertex_normals(x, mesh.faces)
        smoothed = (adj @ x) / deg[:, None]
        acc += np.einsum("ij,ij->i", smoothed - x, normals)
        x = smoothed
    return VertexField(acc, mesh.n_vertices)


def edge_lengths(mesh: TriangleMesh) -> np.ndarray:
    e = mesh.edges
    return np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)


def edge_statistics(mesh: TriangleMesh) -> EdgeStats:
    """Mean, population standard deviation, min and max over unique edges."""
    lengths = edge_lengths(mesh)
    if lengths.size == 0:
        raise ValidationError("mesh has no edges")
    return EdgeStats(float(lengths.mean()), float(lengths.std()),
                     float(lengths.min()), float(lengths.max()))
