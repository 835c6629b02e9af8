"""Report figures rendered straight to PNG files with the Agg canvas."""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .mesh import TriangleMesh


def _save(fig: Figure, path) -> str:
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    return str(path)


def loss_history(histories: dict, path) -> str:
    """Objective per iteration for each stage, stages laid end to end."""
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    start = 0
    for label, hist in histories.items():
        its = np.arange(start, start + len(hist))
        ax.semilogy(its, [max(h.objective, 1e-300) for h in hist], label=f"{label} objective")
        ax.semilogy(its, [max(h.chamfer, 1e-300) for h in hist], ls="--", lw=0.8, label=f"{label} chamfer")
        start += len(hist)
    ax.set_xlabel("iteration (cumulative over stages)")
    ax.set_ylabel("loss (mm$^2$)")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def error_histogram(errors, path, title="per-vertex distance to the other surface") -> str:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.hist(np.asarray(errors), bins=60, color="tab:blue")
    ax.set_xlabel("distance (mm)")
    ax.set_ylabel("vertices")
    ax.set_title(title, fontsize=9)
    return _save(fig, path)


def distortion_histograms(report, path) -> str:
    fig = Figure(figsize=(10, 3.2))
    for k, (name, vals, unit) in enumerate((("area", report.area, "log ratio"),
                                            ("angle", report.angle, "rad"),
                                            ("metric", report.metric, "log ratio"))):
        ax = fig.add_subplot(1, 3, k + 1)
        v = np.asarray(vals).ravel()
        ax.hist(v[np.isfinite(v)], bins=60, color="tab:orange")
        ax.set_title(f"{name} distortion", fontsize=9)
        ax.set_xlabel(unit)
    return _save(fig, path)


def sphere_field(sphere: TriangleMesh, values, path, label="value") -> str:
    """Equirectangular view of a per-vertex field on the template sphere."""
    v = sphere.vertices - sphere.vertices.mean(axis=0)
    r = np.linalg.norm(v, axis=1)
    lon = np.degrees(np.arctan2(v[:, 1], v[:, 0]))
    lat = np.degrees(np.arcsin(np.clip(v[:, 2] / np.where(r > 0, r, 1.0), -1.0, 1.0)))
    fig = Figure(figsize=(8, 4))
    ax = fig.add_subplot()
    size = float(np.clip(4e4 / max(len(lon), 1), 1.0, 40.0))
    sc = ax.scatter(lon, lat, c=np.asarray(values), s=size, cmap="coolwarm", linewidths=0)
    fig.colorbar(sc, ax=ax, label=label)
    ax.set_xlim(-180, 180)
    ax.set_ylim(-90, 90)
    ax.set_xlabel("longitude (deg)")
    ax.set_ylabel("latitude (deg)")
    return _save(fig, path)
