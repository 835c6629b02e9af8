"""Spherical mapping through template correspondence, and its distortion.

A surface produced by flowing the spherical template keeps the template's
vertex order and faces, so vertex ``i`` of the surface maps to vertex ``i``
of the sphere. No parameterisation is solved for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mesh import TriangleMesh, VertexField, face_cross

# faces whose area share is below this fraction of the mean are degenerate
DEGENERATE_RELATIVE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class SphericalMap:
    surface: TriangleMesh
    sphere: TriangleMesh

    def __post_init__(self):
        if self.surface.n_vertices != self.sphere.n_vertices:
            raise ValidationError(f"surface has {self.surface.n_vertices} vertices, "
                                  f"sphere has {self.sphere.n_vertices}")
        if not np.array_equal(self.surface.faces, self.sphere.faces):
            raise ValidationError("surface and sphere face lists differ; no vertex correspondence")


def map_field(smap: SphericalMap, field: VertexField) -> VertexField:
    """Carry a surface field to the sphere (index-wise copy)."""
    field.check_bound(smap.surface)
    flags = None if field.flags is None else np.array(field.flags, copy=True)
    return VertexField.on(smap.sphere, np.array(field.values, copy=True), flags)


def pull_field(smap: SphericalMap, field: VertexField) -> VertexField:
    """Carry a sphere field back to the surface."""
    field.check_bound(smap.sphere)
    flags = None if field.flags is None else np.array(field.flags, copy=True)
    return VertexField.on(smap.surface, np.array(field.values, copy=True), flags)


@dataclass
class DistortionReport:
    """Per-element distortions of the surface-to-sphere map.

    ``area`` (per face) is log of the sphere face's share of total area over
    the surface face's share. ``angle`` (per corner, radians) is the absolute
    angle change. ``metric`` (per edge) is the log length ratio minus half the
    log of the total-area ratio, so a similarity map scores zero everywhere.
    Elements touching a degenerate face on either side are NaN and left out
    of the summaries.
    """

    area: np.ndarray
    angle: np.ndarray
    metric: np.ndarray
    degenerate_faces: np.ndarray
    summary: dict

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate_faces.sum())


def _corner_angles(vertices, faces):
    out = np.empty(faces.shape)
    for k in range(3):
        a = vertices[faces[:, k]]
        u = vertices[faces[:, (k + 1) % 3]] - a
        v = vertices[faces[:, (k + 2) % 3]] - a
        out[:, k] = np.arctan2(np.linalg.norm(np.cross(u, v), axis=1), np.einsum("ij,ij->i", u, v))
    return out


def _summaries(name, values):
    vals = np.abs(values[np.isfinite(values)])
    if vals.size == 0:
        return {f"{name}_mean": float("nan"), f"{name}_p95": float("nan")}
    return {f"{name}_mean": float(vals.mean()), f"{name}_p95": float(np.percentile(vals, 95))}


def distortion(smap: SphericalMap) -> DistortionReport:
    faces = smap.surface.faces
    areas = []
    for mesh in (smap.surface, smap.sphere):
        a = 0.5 * np.linalg.norm(face_cross(mesh.vertices, faces), axis=1)
        total = a.sum()
        if not total > 0:
            raise ValidationError("mesh has zero total area")
        areas.append((a, total))
    (a_f, total_f), (a_s, total_s) = areas
    mean_f, mean_s = total_f / len(faces), total_s / len(faces)
    degenerate = (a_f <= DEGENERATE_RELATIVE_AREA * mean_f) | (a_s <= DEGENERATE_RELATIVE_AREA * mean_s)

    area = np.full(len(faces), np.nan)
    ok = ~degenerate
    area[ok] = np.log((a_s[ok] / total_s) / (a_f[ok] / total_f))

    angle = np.abs(_corner_angles(smap.sphere.vertices, faces) - _corner_angles(smap.surface.vertices, faces))
    angle[degenerate] = np.nan

    edges = smap.surface.edges
    l_f = np.linalg.norm(smap.surface.vertices[edges[:, 1]] - smap.surface.vertices[edges[:, 0]], axis=1)
    l_s = np.linalg.norm(smap.sphere.vertices[edges[:, 1]] - smap.sphere.vertices[edges[:, 0]], axis=1)
    metric = np.full(len(edges), np.nan)
    good = _edges_of_good_faces(faces, edges, ok) & (l_f > 0) & (l_s > 0)
    metric[good] = np.log(l_s[good] / l_f[good]) - 0.5 * np.log(total_s / total_f)

    summary = {}
    for name, vals in (("area", area), ("angle", angle), ("metric", metric)):
        summary.update(_summaries(name, vals))
    summary["degenerate_faces"] = int(degenerate.sum())
    return DistortionReport(area, angle, metric, degenerate, summary)


def _edges_of_good_faces(faces, edges, ok):
    """True for edges with at least one non-degenerate incident face."""
    if ok.all():
        return np.ones(len(edges), dtype=bool)
    e = np.sort(np.stack([faces[ok][:, [0, 1]], faces[ok][:, [1, 2]], faces[ok][:, [2, 0]]]).reshape(-1, 2), axis=1)
    n = int(faces.max()) + 1
    keys = np.unique(e[:, 0] * n + e[:, 1])
    return np.isin(edges[:, 0] * n + edges[:, 1], keys)
