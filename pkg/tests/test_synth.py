import numpy as np
import pytest

from meshflow.errors import ValidationError
from meshflow.mesh import euler_characteristic, icosphere, surface_area
from meshflow.metrics import point_to_surface, self_intersection_fraction
from meshflow.synth import KINDS, bump_pattern, nested_labels, synthesize_fixture, thomsen_area


def test_ellipsoid_area_matches_thomsen():
    s = synthesize_fixture("ellipsoid", {"level": 6})["surface"]
    assert surface_area(s) == pytest.approx(thomsen_area((1.3, 1.0, 0.8)), rel=5e-3)


def test_thomsen_exact_for_sphere():
    assert thomsen_area((2.0, 2.0, 2.0)) == pytest.approx(16 * np.pi, rel=1e-14)


def test_ellipsoid_vertices_lie_on_surface():
    s = synthesize_fixture("ellipsoid", {"level": 3, "axes": (2.0, 1.0, 0.5)})["surface"]
    q = ((s.vertices / [2.0, 1.0, 0.5]) ** 2).sum(axis=1)
    np.testing.assert_allclose(q, 1.0, rtol=1e-12)


def test_nested_gap_is_verified():
    fx = synthesize_fixture("nested-white-pial", {"gap": 0.08})
    white, pial = fx["white"], fx["pial"]
    d = min(point_to_surface(white.vertices, pial).min(), point_to_surface(pial.vertices, white).min())
    assert d >= 0.08
    assert fx.params["achieved_gap"] == pytest.approx(d)
    np.testing.assert_array_equal(white.faces, pial.faces)


def test_nested_explicit_scale():
    fx = synthesize_fixture("nested-white-pial", {"scale": 1.08, "gap": 0.05})
    np.testing.assert_allclose(fx["pial"].vertices, 1.08 * fx["white"].vertices)


def test_nested_scale_too_small_rejected():
    with pytest.raises(ValidationError):
        synthesize_fixture("nested-white-pial", {"scale": 1.01, "gap": 0.08})
    with pytest.raises(ValidationError):
        synthesize_fixture("nested-white-pial", {"scale": 0.9})


def test_nested_labels():
    fx = synthesize_fixture("nested-white-pial", {"level": 2, "labels_dims": (16, 16, 16)})
    lab = fx.labels
    assert lab.kind == "labels"
    assert set(np.unique(lab.values)) == {0, 1, 2}
    centre = tuple(d // 2 for d in lab.dims)
    assert lab.values[centre] == 2
    assert lab.values[0, 0, 0] == 0


@pytest.mark.parametrize("kind", KINDS)
def test_determinism(kind):
    a = synthesize_fixture(kind, {"level": 2, "jitter": 0.02}, seed=5)
    b = synthesize_fixture(kind, {"level": 2, "jitter": 0.02}, seed=5)
    c = synthesize_fixture(kind, {"level": 2, "jitter": 0.02}, seed=6)
    for name in a.meshes:
        assert a[name].vertices.tobytes() == b[name].vertices.tobytes()
        assert a[name].vertices.tobytes() != c[name].vertices.tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_fixtures_are_clean_spheres(kind):
    fx = synthesize_fixture(kind, {"level": 3})
    for mesh in fx.meshes.values():
        assert euler_characteristic(mesh) == 2
        assert self_intersection_fraction(mesh).fraction == 0.0


def test_bump_pattern_peaks_at_one():
    d = icosphere(6).vertices
    b = bump_pattern(d)
    assert b.max() == pytest.approx(1.0, abs=2e-3)
    assert b.min() == pytest.approx(-1.0, abs=2e-3)
    assert b.max() <= 1.0 + 1e-12
    # eight lobes alternate in sign; the mean vanishes
    assert abs(b.mean()) < 1e-12


def test_bumpy_radius():
    fx = synthesize_fixture("bumpy-sphere", {"level": 3, "amplitude": 0.15})
    s = fx["surface"]
    r = np.linalg.norm(s.vertices, axis=1)
    d = s.vertices / r[:, None]
    np.testing.assert_allclose(r, 1 + 0.15 * bump_pattern(d), rtol=1e-12)


def test_dimple_deepens_towards_pole():
    s = synthesize_fixture("dimpled-sphere", {"level": 3})["surface"]
    r = np.linalg.norm(s.vertices, axis=1)
    angle = np.arccos(np.clip(s.vertices[:, 2] / r, -1, 1))
    np.testing.assert_allclose(r, 1 - 0.3 * np.exp(-angle ** 2 / (2 * 0.4 ** 2)), rtol=1e-12)
    order = np.argsort(angle)
    assert np.all(np.diff(r[order]) >= -1e-12)


@pytest.mark.parametrize("kind,params", [
    ("bumpy-sphere", {"amplitude": 1.5}),
    ("dimpled-sphere", {"depth": 1.2}),
    ("dimpled-sphere", {"width": 0.0}),
    ("ellipsoid", {"axes": (1.0, -1.0, 1.0)}),
    ("ellipsoid", {"jitter": 0.5}),
    ("ellipsoid", {"colour": 1}),
    ("torus", {}),
])
def test_rejections(kind, params):
    with pytest.raises(ValidationError):
        synthesize_fixture(kind, params)


def test_nested_labels_standalone():
    lab = nested_labels((1.0, 1.0, 1.0), 1.2, (9, 9, 9))
    assert lab.values[4, 4, 4] == 2
