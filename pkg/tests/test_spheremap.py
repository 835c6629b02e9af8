import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshflow.errors import ValidationError
from meshflow.mesh import TriangleMesh, VertexField, icosphere, mean_curvature
from meshflow.spheremap import SphericalMap, distortion, map_field, pull_field
from meshflow.synth import synthesize_fixture

from conftest import random_rotation


def _ellipsoid_map(level=3):
    surf = synthesize_fixture("ellipsoid", {"level": level})["surface"]
    return SphericalMap(surf, icosphere(level))


def test_round_trip_is_bit_exact(rng):
    smap = _ellipsoid_map()
    values = rng.standard_normal(smap.surface.n_vertices)
    f = VertexField.on(smap.surface, values)
    on_sphere = map_field(smap, f)
    assert on_sphere.n_vertices == smap.sphere.n_vertices
    back = pull_field(smap, on_sphere)
    assert back.values.tobytes() == values.tobytes()
    assert on_sphere.values.tobytes() == values.tobytes()


def test_curvature_values_carry_over_index_wise():
    smap = _ellipsoid_map()
    h = mean_curvature(smap.surface)
    on_sphere = map_field(smap, h)
    np.testing.assert_array_equal(on_sphere.values, h.values)


def test_constant_field_stays_constant():
    smap = _ellipsoid_map(2)
    f = VertexField.on(smap.surface, np.full(smap.surface.n_vertices, 3.5))
    assert np.all(map_field(smap, f).values == 3.5)


def test_mismatched_meshes_rejected():
    with pytest.raises(ValidationError):
        SphericalMap(icosphere(2), icosphere(3))
    s = icosphere(2)
    with pytest.raises(ValidationError):
        SphericalMap(TriangleMesh(s.vertices, s.faces[:, [1, 2, 0]][::-1]), s)


def test_field_bound_to_wrong_mesh_rejected():
    smap = _ellipsoid_map(2)
    other = VertexField.on(icosphere(3), np.zeros(icosphere(3).n_vertices))
    with pytest.raises(ValidationError):
        map_field(smap, other)


def test_identity_map_is_exactly_zero():
    s = icosphere(3)
    rep = distortion(SphericalMap(s, s))
    for arr in (rep.area, rep.angle, rep.metric):
        assert np.all(arr == 0.0)
    assert rep.degenerate_count == 0
    assert all(v == 0 for v in rep.summary.values())


def test_scaled_sphere_has_no_distortion():
    s = icosphere(3)
    rep = distortion(SphericalMap(s.with_vertices(2.0 * s.vertices), s))
    np.testing.assert_allclose(rep.area, 0.0, atol=1e-12)
    np.testing.assert_allclose(rep.metric, 0.0, atol=1e-12)
    np.testing.assert_allclose(rep.angle, 0.0, atol=1e-12)


def _brute_distortion(surface, sphere):
    area, angle, metric = [], [], []
    tot_f = sum(0.5 * np.linalg.norm(np.cross(surface.vertices[b] - surface.vertices[a],
                                               surface.vertices[c] - surface.vertices[a]))
                for a, b, c in surface.faces)
    tot_s = sum(0.5 * np.linalg.norm(np.cross(sphere.vertices[b] - sphere.vertices[a],
                                               sphere.vertices[c] - sphere.vertices[a]))
                for a, b, c in sphere.faces)
    for face in surface.faces:
        P, Q = surface.vertices[face], sphere.vertices[face]
        af = 0.5 * np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0]))
        as_ = 0.5 * np.linalg.norm(np.cross(Q[1] - Q[0], Q[2] - Q[0]))
        area.append(np.log((as_ / tot_s) / (af / tot_f)))
        row = []
        for k in range(3):
            def ang(T):
                u, v = T[(k + 1) % 3] - T[k], T[(k + 2) % 3] - T[k]
                return np.arccos(np.clip(u @ v / np.linalg.norm(u) / np.linalg.norm(v), -1, 1))
            row.append(abs(ang(Q) - ang(P)))
        angle.append(row)
    for i, j in surface.edges:
        lf = np.linalg.norm(surface.vertices[i] - surface.vertices[j])
        ls = np.linalg.norm(sphere.vertices[i] - sphere.vertices[j])
        metric.append(np.log(ls / lf) - 0.5 * np.log(tot_s / tot_f))
    return np.array(area), np.array(angle), np.array(metric)


def test_ellipsoid_matches_per_triangle_recomputation():
    smap = _ellipsoid_map(2)
    rep = distortion(smap)
    area, angle, metric = _brute_distortion(smap.surface, smap.sphere)
    np.testing.assert_allclose(rep.area, area, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(rep.angle, angle, rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(rep.metric, metric, rtol=1e-9, atol=1e-12)
    assert rep.summary["angle_mean"] > 0


def test_degenerate_face_flagged_and_excluded():
    s = icosphere(2)
    v = s.vertices.copy()
    f0 = s.faces[0]
    v[f0[2]] = 0.5 * (v[f0[0]] + v[f0[1]])  # collapse face 0 onto a line
    rep = distortion(SphericalMap(s.with_vertices(v), s))
    assert rep.degenerate_faces[0]
    assert np.isnan(rep.area[0]) and np.isnan(rep.angle[0]).all()
    assert rep.summary["degenerate_faces"] == rep.degenerate_count >= 1
    assert all(np.isfinite(val) for val in rep.summary.values())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.05, 20.0))
def test_summaries_similarity_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    smap = _ellipsoid_map(2)
    base = distortion(smap).summary
    R, t = random_rotation(rng), rng.standard_normal(3)
    surf = smap.surface.with_vertices(scale * smap.surface.vertices @ R.T + t)
    sph = smap.sphere.with_vertices(smap.sphere.vertices * (1.0 / scale) + t)
    for other in (SphericalMap(surf, smap.sphere), SphericalMap(smap.surface, sph)):
        moved = distortion(other).summary
        for k, v in base.items():
            assert moved[k] == pytest.approx(v, rel=1e-9, abs=1e-12)
