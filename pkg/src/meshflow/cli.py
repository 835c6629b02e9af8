"""Command-line entry point: ``meshflow <subcommand> ...``.

Results go to stdout as ``key=value`` lines. Failures print one line
``error: category=<name> message=<text>`` to stderr and exit 1; usage
errors exit 2. ``--report DIR`` writes CSV tables and PNG figures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import _parallel
from .errors import MeshflowError
from .flow import deform_mesh
from .io import (
    RunConfig,
    read_config,
    read_field,
    read_mesh,
    read_svf,
    read_vol,
    write_config,
    write_field,
    write_mesh,
    write_svf,
    write_vol,
)
from .mesh import convexity, euler_characteristic, icosphere, mean_curvature, surface_area
from .metrics import compare_surfaces, self_intersection_fraction

log = logging.getLogger("meshflow")


def _emit(out, key, value):
    if isinstance(value, float):
        value = repr(value)
    out.write(f"{key}={value}\n")


def _emit_all(out, values: dict, prefix=""):
    for key, value in values.items():
        _emit(out, prefix + key, value)


def _report_dir(args):
    if getattr(args, "report", None):
        os.makedirs(args.report, exist_ok=True)
        return args.report
    return None


def _load_config(args) -> RunConfig:
    cfg = read_config(args.config) if getattr(args, "config", None) else RunConfig.defaults()
    overrides = {}
    for key in ("seed", "threads"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    cfg = cfg.updated(**overrides)
    _parallel.set_threads(cfg["threads"])
    return cfg


# -- subcommands ---------------------------------------------------------------------

def cmd_template(args, out):
    center = [float(v) for v in args.center.split(",")] if args.center else (0.0, 0.0, 0.0)
    mesh = icosphere(args.level, args.radius, center)
    write_mesh(mesh, args.output)
    _emit_all(out, {"vertices": mesh.n_vertices, "faces": mesh.n_faces,
                    "euler": euler_characteristic(mesh), "path": args.output})


def cmd_deform(args, out):
    cfg = _load_config(args)
    integ = cfg.integration()
    mesh = read_mesh(args.mesh)
    os.makedirs(args.output, exist_ok=True)
    for i, path in enumerate(args.svf, start=1):
        mesh = deform_mesh(mesh, read_svf(path), integ)
        dest = os.path.join(args.output, f"stage-{i}.ply")
        write_mesh(mesh, dest)
        _emit(out, f"stage-{i}.path", dest)
        _emit(out, f"stage-{i}.area", surface_area(mesh))


def cmd_fit(args, out):
    from .fit import fit_recurrent

    cfg = _load_config(args)
    for key in ("template", "white_target", "pial_target", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            cfg = cfg.updated(**{key: value})
    if cfg["white_target"] is None or cfg["pial_target"] is None:
        raise MeshflowError("fit needs --white and --pial (or white_target/pial_target in the config)")
    template = read_mesh(cfg["template"]) if cfg["template"] else icosphere(cfg["template_level"])
    white, pial = read_mesh(cfg["white_target"]), read_mesh(cfg["pial_target"])
    fit_cfg = cfg.fit_config()
    outdir = cfg["output_dir"]
    os.makedirs(outdir, exist_ok=True)
    write_config(cfg, os.path.join(outdir, "run.cfg"))

    checkpoint = None
    if fit_cfg.checkpoint_every:
        ckdir = os.path.join(outdir, "checkpoints")
        os.makedirs(ckdir, exist_ok=True)

        def checkpoint(label, iteration, field):
            write_svf(field, os.path.join(ckdir, f"{label}-{iteration:05d}.svf"))

    result = fit_recurrent(template, white, pial, fit_cfg, checkpoint)
    for label, stage in zip(result.pipeline.stage_labels, result.stages):
        write_svf(stage.field, os.path.join(outdir, f"{label}.svf"))
        write_mesh(stage.mesh, os.path.join(outdir, f"{label}.ply"))
    _write_history(result.loss_history, os.path.join(outdir, "history.csv"))
    for label, comparison in result.final_metrics.items():
        stage = next(s for s in result.stages if s.label == label)
        _emit(out, f"{label}.iterations", stage.iterations)
        _emit(out, f"{label}.initial_total", stage.history[0].total)
        _emit_all(out, comparison.as_dict(), f"{label}.")
    _emit(out, "failed", int(result.failed))
    if result.failed:
        _emit(out, "failure", result.failure.replace("\n", " "))
    report = _report_dir(args)
    if report:
        from . import plotting

        _emit(out, "figure", plotting.loss_history(result.loss_history, os.path.join(report, "loss.png")))
    if result.failed:
        message = " ".join(result.failure.split())
        sys.stderr.write(f"error: category=divergence message={message}\n")
        return 1
    return 0


def _write_history(histories, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iteration", "chamfer", "edge", "segmentation", "total", "regularizer"])
        for label, hist in histories.items():
            for i, h in enumerate(hist):
                w.writerow([label, i, repr(h.chamfer), repr(h.edge), repr(h.segmentation),
                            repr(h.total), repr(h.regularizer)])


def cmd_metrics(args, out):
    cfg = _load_config(args)
    pred, truth = read_mesh(args.prediction), read_mesh(args.truth)
    comparison = compare_surfaces(pred, truth, cfg["percentile"] if args.percentile is None else args.percentile)
    si = self_intersection_fraction(pred, cfg["si_method"], cfg["max_pairs"])
    _emit_all(out, comparison.as_dict())
    _emit_all(out, si.as_dict())
    report = _report_dir(args)
    if report:
        from . import plotting

        errors = np.asarray(comparison.per_vertex_error)
        with open(os.path.join(report, "vertex_error.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "distance"])
            w.writerows([i, repr(float(e))] for i, e in enumerate(errors))
        with open(os.path.join(report, "intersecting_pairs.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["face_a", "face_b"])
            w.writerows(si.offending_pairs)
        _emit(out, "figure", plotting.error_histogram(errors, os.path.join(report, "error_hist.png")))


def cmd_map(args, out):
    from .mesh import VertexField
    from .spheremap import SphericalMap, distortion, map_field

    _load_config(args)
    surface = read_mesh(args.surface)
    sphere = read_mesh(args.sphere)
    smap = SphericalMap(surface, sphere)
    if args.field:
        field = read_field(args.field, surface)
    elif args.measure == "curvature":
        field = mean_curvature(surface)
    else:
        field = convexity(surface)
    mapped = map_field(smap, VertexField.on(surface, np.asarray(field.values)))
    write_field(mapped, args.output)
    report = distortion(smap)
    _emit(out, "path", args.output)
    _emit_all(out, report.summary)
    rdir = _report_dir(args)
    if rdir:
        from . import plotting

        _emit(out, "figure", plotting.sphere_field(sphere, mapped.values, os.path.join(rdir, "sphere_field.png"),
                                                   args.measure if not args.field else "field"))
        _emit(out, "figure", plotting.distortion_histograms(report, os.path.join(rdir, "distortion.png")))


def _param_value(text):
    low = text.lower()
    if low == "none":
        return None
    if "," in text:
        return tuple(float(v) for v in text.split(","))
    try:
        return int(text)
    except ValueError:
        return float(text)


def cmd_synth(args, out):
    from .synth import synthesize_fixture

    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise MeshflowError(f"--param expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        try:
            params[key.strip()] = _param_value(text.strip())
        except ValueError:
            raise MeshflowError(f"bad value for parameter {key!r}: {text!r}") from None
    fixture = synthesize_fixture(args.kind, params, args.seed if args.seed is not None else 0)
    os.makedirs(args.output, exist_ok=True)
    for name, mesh in fixture.meshes.items():
        path = os.path.join(args.output, f"{name}.ply")
        write_mesh(mesh, path)
        _emit(out, f"{name}.path", path)
        _emit(out, f"{name}.vertices", mesh.n_vertices)
        _emit(out, f"{name}.area", surface_area(mesh))
    if fixture.labels is not None:
        path = os.path.join(args.output, "labels.vol")
        write_vol(fixture.labels, path)
        _emit(out, "labels.path", path)
    if "achieved_gap" in fixture.params:
        _emit(out, "gap", fixture.params["achieved_gap"])


def cmd_losses(args, out):
    from .objective import EdgeLossSpec, chamfer_loss, edge_length_loss, segmentation_loss, total_loss

    cfg = _load_config(args)
    pred, target = read_mesh(args.prediction), read_mesh(args.target)
    if args.edge_target is None:
        spec = EdgeLossSpec.adaptive(surface_area(target), pred.n_faces)
    else:
        spec = EdgeLossSpec.fixed(args.edge_target)
    seg = 0.0
    if args.seg_pred or args.seg_truth:
        if not (args.seg_pred and args.seg_truth):
            raise MeshflowError("--seg-pred and --seg-truth must be given together")
        seg = segmentation_loss(read_vol(args.seg_pred), read_vol(args.seg_truth))
    report = total_loss(chamfer_loss(pred, target), edge_length_loss(pred, spec), seg, cfg.weights())
    _emit(out, "edge_target", spec.target_edge_length)
    _emit_all(out, report.as_dict())


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--threads", type=int, help="worker threads for spatial queries")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    parser = argparse.ArgumentParser(prog="meshflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("template", parents=[common], help="write an icosphere template")
    p.add_argument("--level", type=int, default=7)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--center", help="x,y,z")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_template)

    p = sub.add_parser("deform", parents=[common], help="flow a mesh through SVF files in order")
    p.add_argument("mesh")
    p.add_argument("svf", nargs="+")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_deform)

    p = sub.add_parser("fit", parents=[common], help="fit the staged SVFs to white and pial targets")
    p.add_argument("--template", help="template mesh (default: icosphere of template_level)")
    p.add_argument("--white", dest="white_target")
    p.add_argument("--pial", dest="pial_target")
    p.add_argument("-o", "--output", dest="output_dir")
    p.add_argument("--report", help="directory for CSV tables and figures")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("metrics", parents=[common], help="compare a predicted mesh with a reference")
    p.add_argument("prediction")
    p.add_argument("truth")
    p.add_argument("--percentile", type=float)
    p.add_argument("--report")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("map", parents=[common], help="carry a surface field to the template sphere")
    p.add_argument("surface")
    p.add_argument("--sphere", required=True, help="template sphere the surface was flowed from")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--field", help="per-vertex field file on the surface")
    g.add_argument("--measure", choices=("curvature", "convexity"), default="curvature")
    p.add_argument("-o", "--output", required=True, help="output field file")
    p.add_argument("--report")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic fixture")
    p.add_argument("kind", choices=("ellipsoid", "bumpy-sphere", "dimpled-sphere", "nested-white-pial"))
    p.add_argument("--param", action="append", help="key=value (vectors as a,b,c)")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("losses", parents=[common], help="evaluate the training losses once")
    p.add_argument("prediction")
    p.add_argument("target")
    p.add_argument("--edge-target", type=float, help="fixed edge length (default: adaptive)")
    p.add_argument("--seg-pred")
    p.add_argument("--seg-truth")
    p.set_defaults(func=cmd_losses)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out) or 0
    except MeshflowError as exc:
        category = exc.category
        message = str(exc)
    except OSError as exc:
        category = "io"
        message = f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)
    except MemoryError as exc:
        category = "resource"
        message = str(exc) or "out of memory"
    message = " ".join(message.split())
    sys.stderr.write(f"error: category={category} message={message}\n")
    return 1


if __name__ == "__main__":
    sys.exit(main())
