import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from meshflow.errors import ValidationError
from meshflow.mesh import TriangleMesh, icosphere
from meshflow.metrics import (FaceBVH, closest_point_on_triangles, compare_surfaces, error_map,
                              intersecting_pairs, nearest_rank_percentile, point_to_surface,
                              self_intersection_fraction, triangles_intersect)

from conftest import crumpled_sphere, random_rotation, random_sphere_hull


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _triangle_distance(p, a, b, c):
    """Plane projection if it lands inside, else the nearest edge (row-wise)."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    h = ((p - a) * n).sum(-1)
    q = p - h[..., None] * n
    inside = np.ones(h.shape, dtype=bool)
    for v0, v1 in ((a, b), (b, c), (c, a)):
        inside &= (np.cross(v1 - v0, q - v0) * n).sum(-1) >= 0
    edge = np.minimum(np.minimum(_segment_distance(p, a, b), _segment_distance(p, b, c)),
                      _segment_distance(p, c, a))
    return np.where(inside, np.abs(h), edge)


def _brute_point_to_surface(points, mesh):
    tri = mesh.vertices[mesh.faces]
    return np.array([_triangle_distance(p, tri[:, 0], tri[:, 1], tri[:, 2]).min() for p in points])


def test_closest_point_matches_oracle(rng):
    a, b, c = rng.standard_normal((3, 200, 3))
    p = 2 * rng.standard_normal((200, 3))
    got = np.linalg.norm(p - closest_point_on_triangles(p, a, b, c), axis=1)
    want = _triangle_distance(p, a, b, c)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("k", [1, 4, 64])
def test_point_to_surface_matches_brute_force(rng, k):
    mesh = crumpled_sphere(rng, level=2, noise=0.05)
    pts = 1.5 * rng.standard_normal((150, 3))
    np.testing.assert_allclose(point_to_surface(pts, mesh, k=k), _brute_point_to_surface(pts, mesh),
                               rtol=1e-10, atol=1e-12)


def test_point_to_surface_far_query_points(rng):
    mesh = icosphere(3)
    pts = rng.standard_normal((50, 3))
    pts *= 20 / np.linalg.norm(pts, axis=1)[:, None]
    np.testing.assert_allclose(point_to_surface(pts, mesh, k=2), _brute_point_to_surface(pts, mesh),
                               rtol=1e-12)


def test_vertices_lie_on_their_own_surface():
    mesh = icosphere(3)
    assert point_to_surface(mesh.vertices, mesh).max() == 0.0


# -- triangle pair predicate --------------------------------------------------

def _lp_intersect(A, B):
    """Feasibility of a common point written as convex combinations of both corner sets."""
    a_eq = np.zeros((5, 6))
    a_eq[:3, :3] = A.T
    a_eq[:3, 3:] = -B.T
    a_eq[3, :3] = 1
    a_eq[4, 3:] = 1
    res = linprog(np.zeros(6), A_eq=a_eq, b_eq=[0, 0, 0, 1, 1], bounds=[(0, None)] * 6, method="highs")
    return res.status == 0


def _scaled(T, s):
    c = T.mean(axis=0)
    return c + s * (T - c)


def test_predicate_agrees_with_linear_program(rng):
    checked = 0
    for _ in range(400):
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 3)) * 0.8 + 0.3 * rng.standard_normal(3)
        shrunk = _lp_intersect(_scaled(A, 1 - 1e-6), _scaled(B, 1 - 1e-6))
        grown = _lp_intersect(_scaled(A, 1 + 1e-6), _scaled(B, 1 + 1e-6))
        if shrunk != grown:
            continue
        checked += 1
        assert triangles_intersect(A[None], B[None])[0] == shrunk
    assert checked > 350


def test_crossing_pair():
    A = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0]], dtype=float)
    B = np.array([[0.5, 0.5, -1], [0.5, 0.5, 1], [1.5, -0.5, 0.2]], dtype=float)
    assert triangles_intersect(A[None], B[None])[0]


def test_touching_is_not_intersecting():
    A = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0]], dtype=float)
    # corner of B rests on the interior of A
    B = np.array([[0.5, 0.5, 0], [0.5, 0.5, 1], [1.0, 0.0, 1]], dtype=float)
    assert not triangles_intersect(A[None], B[None])[0]
    # and within the tolerance
    B2 = B + np.array([0, 0, -1e-11])
    assert not triangles_intersect(A[None], B2[None])[0]
    # but a real piercing is caught
    B3 = B + np.array([0, 0, -1e-3])
    assert triangles_intersect(A[None], B3[None])[0]


def test_shared_edge_neighbours_are_not_reported():
    assert self_intersection_fraction(icosphere(4)).fraction == 0.0


def test_coplanar_overlap():
    A = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0]], dtype=float)
    B = np.array([[0.5, 0.5, 0], [3, 0.5, 0], [0.5, 3, 0]], dtype=float)
    far = B + np.array([5.0, 0, 0])
    got = triangles_intersect(np.stack([A, A]), np.stack([B, far]))
    assert got.tolist() == [True, False]


def _with_crossing_pair(base):
    A = np.array([[3, 0, 0], [5, 0, 0], [3, 2, 0]], dtype=float)
    B = np.array([[3.5, 0.5, -1], [3.5, 0.5, 1], [4.5, -0.5, 0.2]], dtype=float)
    n = base.n_vertices
    v = np.concatenate([base.vertices, A, B])
    f = np.concatenate([base.faces, [[n, n + 1, n + 2], [n + 3, n + 4, n + 5]]])
    return TriangleMesh(v, f)


def test_crossing_faces_flagged_exactly():
    base = icosphere(3)
    mesh = _with_crossing_pair(base)
    f = base.n_faces
    for method in ("bvh", "brute"):
        rep = self_intersection_fraction(mesh, method=method)
        assert rep.intersecting_face_count == 2
        assert rep.offending_pairs == [(f, f + 1)]
        assert rep.fraction == 2 / mesh.n_faces


def test_bvh_matches_brute_force(rng):
    for noise in (0.02, 0.08, 0.2):
        mesh = crumpled_sphere(rng, level=3, noise=noise)
        bvh = intersecting_pairs(mesh, "bvh")
        brute = intersecting_pairs(mesh, "brute")
        np.testing.assert_array_equal(bvh, brute)
    assert len(brute) > 0


def test_bvh_candidates_cover_all_box_overlaps(rng):
    mesh = crumpled_sphere(rng, level=2, noise=0.1)
    tri = mesh.vertices[mesh.faces]
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    ov = np.all((lo[:, None] <= hi[None]) & (lo[None] <= hi[:, None]), axis=2)
    i, j = np.nonzero(np.triu(ov, 1))
    want = set(zip(i.tolist(), j.tolist()))
    got = set(map(tuple, FaceBVH(mesh).candidate_pairs().tolist()))
    assert got == want


def test_max_pairs_truncates_report_not_count():
    mesh = crumpled_sphere(np.random.default_rng(1), level=3, noise=0.2)
    rep = self_intersection_fraction(mesh, max_pairs=3)
    assert len(rep.offending_pairs) == 3
    assert rep.intersecting_face_count > 3


# -- surface comparison -------------------------------------------------------

def test_identical_surfaces():
    s = icosphere(3)
    c = compare_surfaces(s, s)
    assert (c.cd, c.assd, c.hd90) == (0.0, 0.0, 0.0)
    assert c.nc == pytest.approx(1.0, abs=1e-12)


def test_concentric_spheres():
    c = compare_surfaces(icosphere(6, radius=1.1), icosphere(6, radius=1.0))
    assert c.assd == pytest.approx(0.1, rel=0.02)
    assert c.hd90 == pytest.approx(0.1, rel=0.02)
    assert c.nc > 0.999


def test_flipped_orientation_gives_negative_nc():
    s = icosphere(3)
    flipped = TriangleMesh(s.vertices, s.faces[:, ::-1])
    c = compare_surfaces(flipped, s)
    assert c.nc == pytest.approx(-1.0, abs=1e-12)


def test_error_map_concentric():
    em = error_map(icosphere(4, radius=1.2), icosphere(4))
    assert em.values.shape == (icosphere(4).n_vertices,)
    np.testing.assert_allclose(em.values, 0.2, rtol=0.02)


def _strip(n=41, length=10.0):
    x = np.linspace(0, length, n)
    v = np.concatenate([np.stack([x, np.zeros(n), np.zeros(n)], 1), np.stack([x, np.ones(n), np.zeros(n)], 1)])
    f = []
    for i in range(n - 1):
        f += [[i, i + 1, n + i + 1], [i, n + i + 1, n + i]]
    return TriangleMesh(v, f)


def test_error_map_translated_strip():
    truth = _strip()
    d = 0.5
    pred = truth.with_vertices(truth.vertices + [d, 0, 0])
    em = error_map(pred, truth).values
    x = truth.vertices[:, 0]
    np.testing.assert_allclose(em[x >= d], 0.0, atol=1e-12)
    np.testing.assert_allclose(em[x < d], d - x[x < d], atol=1e-12)
    assert em.max() == pytest.approx(d)


def test_comparison_rejects_degenerate_and_empty():
    s = icosphere(1)
    v = s.vertices.copy()
    v[s.faces[0, 1]] = v[s.faces[0, 0]]
    with pytest.raises(ValidationError):
        compare_surfaces(s.with_vertices(v), s)
    with pytest.raises(ValidationError):
        compare_surfaces(s, TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)))


def test_nearest_rank_percentile():
    vals = [5.0, 1.0, 3.0, 2.0, 4.0]
    assert nearest_rank_percentile(vals, 100) == 5.0
    assert nearest_rank_percentile(vals, 50) == 3.0
    assert nearest_rank_percentile(vals, 0) == 1.0
    assert nearest_rank_percentile(vals, 90) == 5.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    a = random_sphere_hull(rng, 80)
    b = random_sphere_hull(rng, 60, radius=1.0 + 0.3 * rng.random(), center=0.1 * rng.standard_normal(3))
    c = compare_surfaces(a, b)
    assert c.cd >= 0 and c.assd >= 0
    assert -1.0 <= c.nc <= 1.0
    hds = [compare_surfaces(a, b, percentile=p).hd90 for p in (50, 75, 90, 99)]
    assert hds == sorted(hds)
    # rigid motions leave every metric unchanged
    R, t = random_rotation(rng), rng.standard_normal(3)
    moved = compare_surfaces(a.with_vertices(a.vertices @ R.T + t), b.with_vertices(b.vertices @ R.T + t))
    for k, v in c.as_dict().items():
        assert moved.as_dict()[k] == pytest.approx(v, rel=1e-9, abs=1e-12)
