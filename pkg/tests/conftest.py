import numpy as np
import pytest
from scipy.spatial import ConvexHull

from meshflow.mesh import TriangleMesh


def hull_mesh(points):
    """Outward-oriented convex hull of points in general position."""
    p = np.asarray(points, dtype=np.float64)
    f = ConvexHull(p).simplices.copy()
    c = p[f].mean(axis=1) - p.mean(axis=0)
    n = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    flip = (n * c).sum(axis=1) < 0
    f[flip] = f[flip][:, ::-1]
    return TriangleMesh(p, f)


def random_sphere_hull(rng, n, radius=1.0, center=(0.0, 0.0, 0.0)):
    p = rng.standard_normal((n, 3))
    p /= np.linalg.norm(p, axis=1)[:, None]
    return hull_mesh(p * radius + np.asarray(center))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def torus(n=16, m=16, R=2.0, r=0.5):
    u, v = np.meshgrid(np.arange(n) * 2 * np.pi / n, np.arange(m) * 2 * np.pi / m, indexing="ij")
    verts = np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)],
                     axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n):
        for j in range(m):
            a, b = i * m + j, ((i + 1) % n) * m + j
            c, d = ((i + 1) % n) * m + (j + 1) % m, i * m + (j + 1) % m
            faces += [[a, b, c], [a, c, d]]
    return TriangleMesh(verts, faces)


def cube(side=2.0):
    h = side / 2
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriangleMesh(v, faces)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def crumpled_sphere(rng, level=3, noise=0.15):
    """Icosphere with independent vertex jitter; self-intersects for large noise."""
    from meshflow.mesh import icosphere

    base = icosphere(level)
    return base.with_vertices(base.vertices + noise * rng.standard_normal(base.vertices.shape))


def gradient_check(seed, n_dirs=20, h=1e-5, dims=(6, 6, 6), n_source=50, n_target=60,
                   smoothness_weight=0.1):
    """Worst relative error of the adjoint against central differences along random directions."""
    from meshflow.fit import loss_gradient, loss_value
    from meshflow.objective import EdgeLossSpec
    from meshflow.svf import VelocityField, grid_for_box

    rng = np.random.default_rng(seed)
    src = random_sphere_hull(rng, n_source)
    tgt = random_sphere_hull(rng, n_target, radius=1.2, center=0.1 * rng.standard_normal(3))
    origin, spacing = grid_for_box([-1.6] * 3, [1.6] * 3, dims)
    field = VelocityField(dims, origin, spacing, 0.2 * rng.standard_normal(tuple(dims) + (3,)))
    spec = EdgeLossSpec(0.3)
    grad = loss_gradient(field, src, tgt, spec, smoothness_weight=smoothness_weight)
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(field.data.shape)
        d /= np.linalg.norm(d)
        fp = loss_value(field.with_data(field.data + h * d), src, tgt, spec,
                        smoothness_weight=smoothness_weight)
        fm = loss_value(field.with_data(field.data - h * d), src, tgt, spec,
                        smoothness_weight=smoothness_weight)
        fd = (fp - fm) / (2 * h)
        an = float((grad * d).sum())
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-12))
    return worst


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
