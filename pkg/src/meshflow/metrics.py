"""Surface comparison metrics and self-intersection detection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _parallel
from .errors import ValidationError
from .mesh import TriangleMesh, VertexField, face_areas, vertex_normals
from .objective import chamfer_terms

# geometry closer than this (mm) counts as touching, not intersecting
TOUCH_TOLERANCE = 1e-10
MAX_REPORTED_PAIRS = 100

_QUERY_CHUNK = 4096


@dataclass(frozen=True)
class SurfaceComparison:
    cd: float
    assd: float
    hd90: float
    nc: float
    per_vertex_error: VertexField

    def as_dict(self) -> dict:
        return {"cd": self.cd, "assd": self.assd, "hd90": self.hd90, "nc": self.nc}


@dataclass(frozen=True)
class SelfIntersectionReport:
    intersecting_face_count: int
    total_faces: int
    fraction: float
    offending_pairs: list

    def as_dict(self) -> dict:
        return {"si_faces": self.intersecting_face_count, "si_total_faces": self.total_faces,
                "si": self.fraction}


# -- point to surface ---------------------------------------------------------

def _closest_params(p, a, ab, ac):
    """Barycentric (v, w) of the closest point a + v*ab + w*ac to p.

    Voronoi-region walk after Ericson, Real-Time Collision Detection 5.1.5;
    regions are applied lowest priority first so earlier tests win.
    """
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = ap - ab
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = ap - ac
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        m = (va <= 0) & (d4 >= d3) & (d5 >= d6)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        v = np.where(m, 1.0 - t, v)
        w = np.where(m, t, w)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        v = np.where(m, 0.0, v)
        w = np.where(m, d2 / (d2 - d6), w)
        m = (d6 >= 0) & (d5 <= d6)
        v = np.where(m, 0.0, v)
        w = np.where(m, 1.0, w)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = np.where(m, d1 / (d1 - d3), v)
        w = np.where(m, 0.0, w)
        m = (d3 >= 0) & (d4 <= d3)
        v = np.where(m, 1.0, v)
        w = np.where(m, 0.0, w)
        m = (d1 <= 0) & (d2 <= 0)
        v = np.where(m, 0.0, v)
        w = np.where(m, 0.0, w)
    return v, w


def closest_point_on_triangles(p, a, b, c):
    """Closest point of triangle (a, b, c) to p, row-wise over (n, 3) arrays."""
    ab, ac = b - a, c - a
    v, w = _closest_params(p, a, ab, ac)
    return a + ab * v[:, None] + ac * w[:, None]


def _distances(q, a, ab, ac):
    v, w = _closest_params(q, a, ab, ac)
    r = q - a - ab * v[:, None] - ac * w[:, None]
    return np.sqrt(np.einsum("ij,ij->i", r, r))


def point_to_surface(points, mesh: TriangleMesh, k: int = 64) -> np.ndarray:
    """Exact distance from each point to the nearest triangle of ``mesh``.

    The ``k`` triangles with the nearest centroids are tested first. A
    triangle whose centroid is at distance c is no closer than c - R, with R
    the largest centroid-to-corner radius, so a point is settled when its
    k-th centroid distance minus R reaches the best distance found; the rest
    fall back to a ball query of radius best + R.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    a = tri[:, 0]
    ab = tri[:, 1] - a
    ac = tri[:, 2] - a
    centroids = tri.mean(axis=1)
    reach = float(np.max(np.linalg.norm(tri - centroids[:, None, :], axis=2)))
    ctree = cKDTree(centroids)
    k = min(k, len(tri))
    best = np.empty(len(pts))
    last = np.empty(len(pts))
    for start in range(0, len(pts), _QUERY_CHUNK):
        rows = slice(start, start + _QUERY_CHUNK)
        dc, ci = ctree.query(pts[rows], k=k, workers=_parallel.workers())
        dc, ci = dc.reshape(-1, k), ci.reshape(-1, k).ravel()
        d = _distances(np.repeat(pts[rows], k, axis=0), a[ci], ab[ci], ac[ci])
        best[rows] = d.reshape(-1, k).min(axis=1)
        last[rows] = dc[:, -1]
    if k == len(tri):
        return best
    pending = np.flatnonzero(last - reach < best)
    for start in range(0, len(pending), _QUERY_CHUNK):
        rows = pending[start:start + _QUERY_CHUNK]
        lists = ctree.query_ball_point(pts[rows], best[rows] + reach + 1e-12,
                                       workers=_parallel.workers())
        counts = np.array([len(x) for x in lists], dtype=np.int64)
        if counts.sum() == 0:
            continue
        fi = np.fromiter((i for x in lists for i in x), dtype=np.int64, count=int(counts.sum()))
        owner = np.repeat(np.arange(len(rows)), counts)
        d = _distances(pts[rows][owner], a[fi], ab[fi], ac[fi])
        found = np.full(len(rows), np.inf)
        np.minimum.at(found, owner, d)
        best[rows] = np.minimum(best[rows], found)
    return best


def _check_nondegenerate(mesh: TriangleMesh, name: str) -> None:
    if mesh.n_faces == 0 or mesh.n_vertices == 0:
        raise ValidationError(f"{name} mesh is empty")
    areas = face_areas(mesh)
    if not np.all(areas > 1e-12):
        raise ValidationError(f"{name} mesh has degenerate face {int(np.argmin(areas))}")


def nearest_rank_percentile(values, percentile: float) -> float:
    """Smallest value with at least ``percentile`` percent of the data at or below it."""
    d = np.sort(np.asarray(values, dtype=np.float64))
    if d.size == 0:
        raise ValidationError("percentile of an empty set")
    k = max(1, math.ceil(percentile / 100.0 * d.size))
    return float(d[min(k, d.size) - 1])


def compare_surfaces(prediction: TriangleMesh, truth: TriangleMesh,
                     percentile: float = 90.0) -> SurfaceComparison:
    """CD (vertex-to-vertex), ASSD, HD at ``percentile``, normal consistency.

    ASSD and HD use point-to-triangle distances from the vertices of each
    mesh to the other surface, pooled over both directions. NC pairs every
    vertex with its nearest vertex on the other mesh, in both directions.
    The per-vertex error map is measured from truth to prediction.
    """
    _check_nondegenerate(prediction, "prediction")
    _check_nondegenerate(truth, "truth")
    cd, i_pt, _, i_tp, _ = chamfer_terms(prediction.vertices, truth.vertices)
    d_pt = point_to_surface(prediction.vertices, truth)
    d_tp = point_to_surface(truth.vertices, prediction)
    pooled = np.concatenate([d_pt, d_tp])
    assd = float(pooled.sum() / pooled.size)
    hd = nearest_rank_percentile(pooled, percentile)
    n_pred = vertex_normals(prediction).values
    n_truth = vertex_normals(truth).values
    dots = np.concatenate([
        np.einsum("ij,ij->i", n_pred, n_truth[i_pt]),
        np.einsum("ij,ij->i", n_truth, n_pred[i_tp]),
    ])
    nc = float(np.clip(dots.mean(), -1.0, 1.0))
    return SurfaceComparison(cd, assd, hd, nc, VertexField.on(truth, d_tp))


def error_map(prediction: TriangleMesh, truth: TriangleMesh) -> VertexField:
    """Distance from each truth vertex to the prediction surface."""
    return VertexField.on(truth, point_to_surface(truth.vertices, prediction))


# -- triangle-triangle intersection -------------------------------------------

def _unit_normals(tri):
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return n / norm, norm[:, 0]


def _pierces(p, q, tri, unit, eps):
    """Segment p-q crosses the plane of ``tri`` strictly inside the triangle."""
    a = tri[:, 0]
    dp = np.einsum("ij,ij->i", p - a, unit)
    dq = np.einsum("ij,ij->i", q - a, unit)
    crossing = ((dp > eps) & (dq < -eps)) | ((dp < -eps) & (dq > eps))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = dp / (dp - dq)
        x = p + (q - p) * t[:, None]
    inside = crossing.copy()
    for k in range(3):
        u, v = tri[:, k], tri[:, (k + 1) % 3]
        e = v - u
        el = np.linalg.norm(e, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.einsum("ij,ij->i", np.cross(unit, e), x - u) / el
        inside &= s > eps
    return inside


def _coplanar_overlap(A, B, normal, eps):
    """Proper 2D overlap of coplanar triangles after projection."""
    drop = np.argmax(np.abs(normal), axis=1)
    keep = np.array([[1, 2], [0, 2], [0, 1]])[drop]
    a2 = np.take_along_axis(A, keep[:, None, :], axis=2)
    b2 = np.take_along_axis(B, keep[:, None, :], axis=2)

    def cross2(o, p, q):
        return (p[:, 0] - o[:, 0]) * (q[:, 1] - o[:, 1]) - (p[:, 1] - o[:, 1]) * (q[:, 0] - o[:, 0])

    def strictly_inside(pt, tri):
        orient = np.sign(cross2(tri[:, 0], tri[:, 1], tri[:, 2]))
        ok = orient != 0
        for k in range(3):
            u, v = tri[:, k], tri[:, (k + 1) % 3]
            el = np.linalg.norm(v - u, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                s = orient * cross2(u, v, pt) / el
            ok &= s > eps
        return ok

    hit = np.zeros(len(A), dtype=bool)
    for i in range(3):
        p1, p2 = a2[:, i], a2[:, (i + 1) % 3]
        lp = np.linalg.norm(p2 - p1, axis=1)
        for j in range(3):
            q1, q2 = b2[:, j], b2[:, (j + 1) % 3]
            lq = np.linalg.norm(q2 - q1, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                s1 = cross2(p1, p2, q1) / lp
                s2 = cross2(p1, p2, q2) / lp
                s3 = cross2(q1, q2, p1) / lq
                s4 = cross2(q1, q2, p2) / lq
            hit |= (s1 * s2 < 0) & (np.abs(s1) > eps) & (np.abs(s2) > eps) \
                & (s3 * s4 < 0) & (np.abs(s3) > eps) & (np.abs(s4) > eps)
    for i in range(3):
        hit |= strictly_inside(a2[:, i], b2) | strictly_inside(b2[:, i], a2)
    hit |= strictly_inside(a2.mean(axis=1), b2) | strictly_inside(b2.mean(axis=1), a2)
    return hit


def triangles_intersect(A, B, eps: float = TOUCH_TOLERANCE) -> np.ndarray:
    """Row-wise proper intersection test for triangle arrays of shape (n, 3, 3).

    Triangles that only touch (within ``eps`` mm) do not intersect.
    """
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3, 3)
    out = np.zeros(len(A), dtype=bool)
    if len(A) == 0:
        return out
    na, la = _unit_normals(A)
    nb, lb = _unit_normals(B)
    valid = (la > 0) & (lb > 0)
    dB = np.einsum("ikj,ij->ik", B - A[:, :1], na)  # B's corners vs plane of A
    dA = np.einsum("ikj,ij->ik", A - B[:, :1], nb)
    sep = ((dB > eps).all(1) | (dB < -eps).all(1) | (dA > eps).all(1) | (dA < -eps).all(1))
    coplanar = (np.abs(dB) <= eps).all(1) | (np.abs(dA) <= eps).all(1)
    general = valid & ~sep & ~coplanar
    if general.any():
        g = np.flatnonzero(general)
        a, b, ua, ub = A[g], B[g], na[g], nb[g]
        hit = np.zeros(len(g), dtype=bool)
        for k in range(3):
            hit |= _pierces(a[:, k], a[:, (k + 1) % 3], b, ub, eps)
            hit |= _pierces(b[:, k], b[:, (k + 1) % 3], a, ua, eps)
        out[g] = hit
    cop = valid & coplanar
    if cop.any():
        c = np.flatnonzero(cop)
        out[c] = _coplanar_overlap(A[c], B[c], na[c], eps)
    return out


# -- bounding volume hierarchy -------------------------------------------------

def _morton_order(centroids):
    lo = centroids.min(axis=0)
    ext = np.maximum(centroids.max(axis=0) - lo, 1e-300)
    q = np.clip(((centroids - lo) / ext * 1023).astype(np.uint64), 0, 1023)

    def spread(x):
        x = (x | (x << np.uint64(16))) & np.uint64(0x030000FF)
        x = (x | (x << np.uint64(8))) & np.uint64(0x0300F00F)
        x = (x | (x << np.uint64(4))) & np.uint64(0x030C30C3)
        x = (x | (x << np.uint64(2))) & np.uint64(0x09249249)
        return x

    code = spread(q[:, 0]) | (spread(q[:, 1]) << np.uint64(1)) | (spread(q[:, 2]) << np.uint64(2))
    return np.argsort(code, kind="stable")


class FaceBVH:
    """Implicit complete binary tree of face bounding boxes over Morton-sorted leaves."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = 8):
        tri = mesh.vertices[mesh.faces]
        self.lo = tri.min(axis=1)
        self.hi = tri.max(axis=1)
        n = mesh.n_faces
        order = _morton_order(tri.mean(axis=1))
        n_leaves = max(1, -(-n // leaf_size))
        depth = max(0, math.ceil(math.log2(n_leaves)))
        P = 1 << depth
        padded = np.full(P * leaf_size, -1, dtype=np.int64)
        padded[:n] = order
        self.leaf_faces = padded.reshape(P, leaf_size)
        self.n_leaves = P
        self.depth = depth

        node_lo = np.full((2 * P, 3), np.inf)
        node_hi = np.full((2 * P, 3), -np.inf)
        valid = self.leaf_faces >= 0
        flo = np.where(valid[..., None], self.lo[self.leaf_faces], np.inf)
        fhi = np.where(valid[..., None], self.hi[self.leaf_faces], -np.inf)
        node_lo[P:] = flo.min(axis=1)
        node_hi[P:] = fhi.max(axis=1)
        for level in range(depth - 1, -1, -1):
            idx = np.arange(1 << level, 1 << (level + 1))
            node_lo[idx] = np.minimum(node_lo[2 * idx], node_lo[2 * idx + 1])
            node_hi[idx] = np.maximum(node_hi[2 * idx], node_hi[2 * idx + 1])
        self.node_lo = node_lo
        self.node_hi = node_hi

    def _overlap(self, a, b):
        return np.all((self.node_lo[a] <= self.node_hi[b]) & (self.node_lo[b] <= self.node_hi[a]), axis=1)

    def candidate_pairs(self) -> np.ndarray:
        """Face pairs (i < j) whose bounding boxes overlap."""
        a = np.array([1])
        b = np.array([1])
        for _ in range(self.depth):
            nonempty = np.all(self.node_lo[a] <= self.node_hi[a], axis=1)
            a, b = a[nonempty], b[nonempty]
            same = a == b
            keep = same | self._overlap(a, b)
            a, b, same = a[keep], b[keep], same[keep]
            sa, da, db = a[same], a[~same], b[~same]
            a = np.concatenate([2 * sa, 2 * sa + 1, 2 * sa,
                                2 * da, 2 * da, 2 * da + 1, 2 * da + 1])
            b = np.concatenate([2 * sa, 2 * sa + 1, 2 * sa + 1,
                                2 * db, 2 * db + 1, 2 * db, 2 * db + 1])
        keep = (a == b) | self._overlap(a, b)
        a, b = a[keep] - self.n_leaves, b[keep] - self.n_leaves
        fa = self.leaf_faces[a][:, :, None]
        fb = self.leaf_faces[b][:, None, :]
        fa, fb = np.broadcast_arrays(fa, fb)
        fa, fb = fa.reshape(-1), fb.reshape(-1)
        ok = (fa >= 0) & (fb >= 0) & (fa != fb)
        fa, fb = fa[ok], fb[ok]
        i, j = np.minimum(fa, fb), np.maximum(fa, fb)
        pairs = np.unique(np.stack([i, j], axis=1), axis=0)
        box = np.all((self.lo[pairs[:, 0]] <= self.hi[pairs[:, 1]])
                     & (self.lo[pairs[:, 1]] <= self.hi[pairs[:, 0]]), axis=1)
        return pairs[box]


def _non_adjacent(faces, pairs):
    fa, fb = faces[pairs[:, 0]], faces[pairs[:, 1]]
    shared = (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))
    return pairs[~shared]


def _test_pairs(mesh, pairs, chunk=200_000):
    pairs = _non_adjacent(mesh.faces, pairs)
    tri = mesh.vertices[mesh.faces]
    hits = []
    for s in range(0, len(pairs), chunk):
        p = pairs[s:s + chunk]
        hits.append(p[triangles_intersect(tri[p[:, 0]], tri[p[:, 1]])])
    return np.concatenate(hits) if hits else np.empty((0, 2), dtype=np.int64)


def intersecting_pairs(mesh: TriangleMesh, method: str = "bvh") -> np.ndarray:
    """Sorted (k, 2) array of non-adjacent face pairs that properly intersect.

    ``method="brute"`` tests every face pair (with only the bounding-box
    rejection in front of the exact predicate) and exists as an oracle.
    """
    if mesh.n_faces < 2:
        return np.empty((0, 2), dtype=np.int64)
    if method == "bvh":
        pairs = FaceBVH(mesh).candidate_pairs()
    elif method == "brute":
        tri = mesh.vertices[mesh.faces]
        lo, hi = tri.min(axis=1), tri.max(axis=1)
        n = mesh.n_faces
        found = []
        block = 256
        for s in range(0, n, block):
            i = np.arange(s, min(s + block, n))
            ov = np.all((lo[i, None, :] <= hi[None, :, :]) & (lo[None, :, :] <= hi[i, None, :]), axis=2)
            ov &= np.arange(n)[None, :] > i[:, None]
            ii, jj = np.nonzero(ov)
            found.append(np.stack([i[ii], jj], axis=1))
        pairs = np.concatenate(found)
    else:
        raise ValidationError(f"unknown method {method!r}")
    hits = _test_pairs(mesh, pairs)
    if len(hits) == 0:
        return hits.reshape(0, 2)
    return hits[np.lexsort((hits[:, 1], hits[:, 0]))]


def self_intersection_fraction(mesh: TriangleMesh, method: str = "bvh",
                               max_pairs: int = MAX_REPORTED_PAIRS) -> SelfIntersectionReport:
    """Fraction of faces that properly intersect at least one non-adjacent face."""
    hits = intersecting_pairs(mesh, method)
    faces = np.unique(hits.ravel())
    total = mesh.n_faces
    return SelfIntersectionReport(
        intersecting_face_count=int(len(faces)),
        total_faces=int(total),
        fraction=float(len(faces) / total) if total else 0.0,
        offending_pairs=[tuple(int(x) for x in p) for p in hits[:max_pairs]],
    )
