"""File formats: OBJ/PLY meshes, SVF and VOL binary grids, vertex fields, run configs.

Binary layouts (all little-endian)::

    SVF1: magic "SVF1" | u32 version | 3 x u32 dims | 3 x f64 origin
          | 3 x f64 spacing | 8 reserved bytes          (76-byte header)
          then nx*ny*nz*3 f32, x fastest, components interleaved
    VOL1: magic "VOL1" | u32 version | 3 x u32 dims | 3 x f64 origin
          | 3 x f64 spacing | u32 channels | u32 kind  (76-byte header)
          then nx*ny*nz*channels values, x fastest, channels interleaved;
          kind 0 = i32 labels (channels 1), kind 1 = f32 probabilities
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ParseError,
    TruncatedFileError,
    UnsupportedFormatError,
    ValidationError,
    VersionMismatchError,
)
from .fit import FitConfig, StageSpec
from .flow import IntegrationConfig
from .mesh import TriangleMesh, VertexField
from .objective import LossWeights, VoxelGrid
from .svf import VelocityField

GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sI3I3d3d8s")
HEADER_SIZE = _GRID_HEADER.size  # 76
_F32_MAX = float(np.finfo(np.float32).max)


# -- meshes -------------------------------------------------------------------------

def _suffix(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in (".obj", ".ply"):
        raise UnsupportedFormatError(f"unsupported mesh extension {ext!r}; use .obj or .ply", path)
    return ext


def read_mesh(path) -> TriangleMesh:
    """Read an OBJ or PLY triangle mesh, chosen by file extension."""
    return read_obj(path) if _suffix(path) == ".obj" else read_ply(path)


def write_mesh(mesh: TriangleMesh, path, binary: bool = True) -> None:
    """Write OBJ (always ASCII) or PLY (binary little-endian f32 unless ``binary=False``)."""
    if _suffix(path) == ".obj":
        write_obj(mesh, path)
    else:
        write_ply(mesh, path, binary=binary)


_OBJ_IGNORED = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l"}


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="strict") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            key = parts[0]
            if key == "v":
                if len(parts) not in (4, 5):
                    raise ParseError(f"vertex record needs 3 coordinates, got {len(parts) - 1}", path, lineno)
                try:
                    xyz = [float(v) for v in parts[1:4]]
                except ValueError as exc:
                    raise ParseError(f"bad vertex coordinate: {exc}", path, lineno) from None
                verts.append(xyz)
            elif key == "f":
                if len(parts) - 1 != 3:
                    raise UnsupportedFormatError(
                        f"face with {len(parts) - 1} vertices; only triangles are supported", path, lineno)
                tri = []
                for token in parts[1:]:
                    try:
                        k = int(token.split("/", 1)[0])
                    except ValueError:
                        raise ParseError(f"bad face index {token!r}", path, lineno) from None
                    if k == 0:
                        raise ParseError("face index 0 is invalid (OBJ indices are 1-based)", path, lineno)
                    k = k - 1 if k > 0 else len(verts) + k
                    if not 0 <= k < len(verts):
                        raise ParseError(f"face index {token} refers to an undefined vertex", path, lineno)
                    tri.append(k)
                faces.append(tri)
            elif key not in _OBJ_IGNORED:
                raise ParseError(f"unknown OBJ record {key!r}", path, lineno)
    if not faces:
        raise ParseError("no faces in file", path)
    return _mesh_or_parse_error(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64), path)


def _mesh_or_parse_error(vertices, faces, path):
    try:
        return TriangleMesh(vertices, faces)
    except ValidationError as exc:
        raise ParseError(str(exc), path) from None


def write_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist())
        fh.writelines(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, (count_dtype, item_dtype))


def _ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise BadMagicError("not a PLY file (missing 'ply' magic or 'end_header')", path, 1)
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise UnsupportedFormatError(f"unsupported PLY format line {line!r}", path, lineno)
            if parts[2] != "1.0":
                raise VersionMismatchError(f"PLY version {parts[2]} is not 1.0", path, lineno)
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append(_PlyElement(parts[1], int(parts[2])))
            except (IndexError, ValueError):
                raise ParseError(f"bad element line {line!r}", path, lineno) from None
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, lineno)
            try:
                if parts[1] == "list":
                    elements[-1].props.append((parts[4], (_PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (IndexError, KeyError):
                raise ParseError(f"bad property line {line!r}", path, lineno) from None
        else:
            raise ParseError(f"unknown PLY header keyword {parts[0]!r}", path, lineno)
    if fmt is None:
        raise ParseError("PLY header has no format line", path)
    return fmt, elements, body_start, len(lines) + 2


def read_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, start, header_lines = _ply_header(data, path)
    names = [e.name for e in elements]
    if "vertex" not in names or "face" not in names:
        raise ParseError("PLY file needs vertex and face elements", path)
    vprops = [p[0] for p in elements[names.index("vertex")].props]
    for axis in "xyz":
        if axis not in vprops:
            raise ParseError(f"vertex element has no {axis} property", path)
    if fmt == "ascii":
        return _read_ply_ascii(data[start:], elements, path, header_lines)
    return _read_ply_binary(data, start, elements, "<" if fmt == "binary_little_endian" else ">", path)


def _face_prop(element, path):
    lists = [p for p in element.props if not isinstance(p[1], str)]
    if len(lists) != 1 or lists[0][0] not in ("vertex_indices", "vertex_index"):
        raise ParseError("face element needs one vertex_indices list property", path)
    return lists[0]


def _read_ply_ascii(body: bytes, elements, path, first_line):
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    verts = faces = None
    for el in elements:
        rows = []
        for _ in range(el.count):
            while pos < len(lines) and not lines[pos].strip():
                pos += 1
            if pos >= len(lines):
                raise TruncatedFileError(f"expected {el.count} {el.name} records, file ended", path,
                                         first_line + pos)
            rows.append((first_line + pos, lines[pos].split()))
            pos += 1
        if el.name == "vertex":
            order = [next(i for i, p in enumerate(el.props) if p[0] == a) for a in "xyz"]
            if any(not isinstance(el.props[i][1], str) for i in order):
                raise ParseError("vertex coordinates must be scalar properties", path)
            verts = np.empty((el.count, 3))
            for k, (lineno, tok) in enumerate(rows):
                try:
                    verts[k] = [float(tok[i]) for i in order]
                except (ValueError, IndexError):
                    raise ParseError("malformed vertex record", path, lineno) from None
        elif el.name == "face":
            _face_prop(el, path)
            faces = np.empty((el.count, 3), dtype=np.int64)
            for k, (lineno, tok) in enumerate(rows):
                try:
                    n = int(tok[0])
                    idx = [int(t) for t in tok[1:]]
                except ValueError:
                    raise ParseError("malformed face record", path, lineno) from None
                if n != 3:
                    raise UnsupportedFormatError(
                        f"face with {n} vertices; only triangles are supported", path, lineno)
                if len(idx) != 3:
                    raise ParseError("malformed face record", path, lineno)
                faces[k] = idx
    _check_indices(faces, len(verts), path)
    return _mesh_or_parse_error(verts, faces, path)


def _check_indices(faces, n, path):
    bad = np.flatnonzero((faces < 0).any(axis=1) | (faces >= n).any(axis=1))
    if bad.size:
        raise ParseError(f"face {int(bad[0])} references a vertex outside 0..{n - 1}", path)


def _read_ply_binary(data: bytes, offset: int, elements, order: str, path):
    verts = faces = None
    for el in elements:
        scalar = all(isinstance(p[1], str) for p in el.props)
        if scalar:
            dt = np.dtype([(name, order + t) for name, t in el.props])
            need = dt.itemsize * el.count
            if offset + need > len(data):
                raise TruncatedFileError(
                    f"{el.name} block needs {need} bytes, {len(data) - offset} remain", path, offset=offset)
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=offset)
            if el.name == "vertex":
                verts = np.stack([arr[a].astype(np.float64) for a in "xyz"], axis=1)
            offset += need
            continue
        if el.name != "face":
            offset = _skip_list_element(data, offset, el, order, path)
            continue
        name, (count_t, item_t) = _face_prop(el, path)
        if len(el.props) != 1:
            raise UnsupportedFormatError("face element with extra properties is not supported", path)
        dt = np.dtype([("n", order + count_t), ("i", order + item_t, (3,))])
        need = dt.itemsize * el.count
        ct = np.dtype(order + count_t)
        # verify counts one record at a time only until a non-triangle shows up
        arr = None
        if offset + need <= len(data):
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=offset)
        if arr is None or np.any(arr["n"] != 3):
            pos = offset
            for k in range(el.count):
                if pos + ct.itemsize > len(data):
                    raise TruncatedFileError(f"face {k} is cut off", path, offset=pos)
                n = int(np.frombuffer(data, dtype=ct, count=1, offset=pos)[0])
                if n != 3:
                    raise UnsupportedFormatError(
                        f"face {k} has {n} vertices; only triangles are supported", path, offset=pos)
                pos += dt.itemsize
            raise TruncatedFileError(f"face block needs {need} bytes, {len(data) - offset} remain",
                                     path, offset=offset)
        faces = arr["i"].astype(np.int64)
        offset += need
    if offset != len(data):
        raise ParseError(f"{len(data) - offset} unexpected trailing bytes", path, offset=offset)
    _check_indices(faces, len(verts), path)
    return _mesh_or_parse_error(verts, faces, path)


def _skip_list_element(data, offset, el, order, path):
    for k in range(el.count):
        for name, t in el.props:
            if isinstance(t, str):
                offset += np.dtype(t).itemsize
                continue
            ct, it = np.dtype(order + t[0]), np.dtype(t[1])
            if offset + ct.itemsize > len(data):
                raise TruncatedFileError(f"{el.name} record {k} is cut off", path, offset=offset)
            n = int(np.frombuffer(data, dtype=ct, count=1, offset=offset)[0])
            offset += ct.itemsize + n * it.itemsize
    if offset > len(data):
        raise TruncatedFileError(f"{el.name} block is cut off", path, offset=len(data))
    return offset


def write_ply(mesh: TriangleMesh, path, binary: bool = True, double: bool = False) -> None:
    """Write PLY; binary files hold f32 (or f64 with ``double=True``) coordinates."""
    vtype = "double" if double else "float"
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {mesh.n_vertices}\n"
              f"property {vtype} x\nproperty {vtype} y\nproperty {vtype} z\n"
              f"element face {mesh.n_faces}\nproperty list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f8" if double else "<f4").tobytes())
            rec = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = mesh.faces
            fh.write(rec.tobytes())
        else:
            fh.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()).encode())
            fh.write("".join(f"3 {a} {b} {c}\n" for a, b, c in mesh.faces.tolist()).encode())


# -- binary grids -------------------------------------------------------------------

def _read_grid_header(data: bytes, magic: bytes, path):
    if len(data) < 4 or data[:4] != magic:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {magic!r}", path, offset=0)
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError(f"header needs {HEADER_SIZE} bytes, file has {len(data)}", path,
                                 offset=len(data))
    _, version, nx, ny, nz, ox, oy, oz, sx, sy, sz, tail = _GRID_HEADER.unpack_from(data)
    if version != GRID_VERSION:
        raise VersionMismatchError(f"version {version}, expected {GRID_VERSION}", path, offset=4)
    return (nx, ny, nz), (ox, oy, oz), (sx, sy, sz), tail


def _check_payload(data, expected, path):
    actual = len(data) - HEADER_SIZE
    if actual < expected:
        raise TruncatedFileError(f"payload is {actual} bytes, expected {expected}", path,
                                 offset=len(data))
    if actual > expected:
        raise ParseError(f"payload is {actual} bytes, expected {expected} (trailing data)", path,
                         offset=HEADER_SIZE + expected)


def _x_fastest(values: np.ndarray) -> np.ndarray:
    """(nx, ny, nz, k) -> buffer order with x varying fastest."""
    return np.ascontiguousarray(values.transpose(2, 1, 0, 3))


def _from_x_fastest(flat: np.ndarray, dims, k) -> np.ndarray:
    nx, ny, nz = dims
    return flat.reshape(nz, ny, nx, k).transpose(2, 1, 0, 3)


def _f32_checked(values, what):
    if np.any(np.abs(values) > _F32_MAX):
        raise ValidationError(f"{what} exceeds the float32 range")
    return values.astype("<f4")


def write_svf(field: VelocityField, path) -> None:
    header = _GRID_HEADER.pack(b"SVF1", GRID_VERSION, *field.dims, *field.origin.tolist(),
                               *field.spacing.tolist(), bytes(8))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_f32_checked(_x_fastest(field.data), "velocity").tobytes())


def read_svf(path) -> VelocityField:
    with open(path, "rb") as fh:
        data = fh.read()
    dims, origin, spacing, _ = _read_grid_header(data, b"SVF1", path)
    n = dims[0] * dims[1] * dims[2]
    _check_payload(data, n * 12, path)
    flat = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).astype(np.float64)
    try:
        return VelocityField(dims, origin, spacing, _from_x_fastest(flat, dims, 3))
    except ValidationError as exc:
        raise ParseError(str(exc), path) from None


def write_vol(grid: VoxelGrid, path) -> None:
    kind = 0 if grid.kind == "labels" else 1
    tail = struct.pack("<II", grid.channels, kind)
    header = _GRID_HEADER.pack(b"VOL1", GRID_VERSION, *grid.dims, *grid.origin.tolist(),
                               *grid.spacing.tolist(), tail)
    values = grid.values.reshape(grid.dims + (grid.channels,))
    with open(path, "wb") as fh:
        fh.write(header)
        if kind == 0:
            if values.max() > np.iinfo(np.int32).max:
                raise ValidationError("label exceeds the int32 range")
            fh.write(_x_fastest(values).astype("<i4").tobytes())
        else:
            fh.write(_x_fastest(values).astype("<f4").tobytes())


def read_vol(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    dims, origin, spacing, tail = _read_grid_header(data, b"VOL1", path)
    channels, kind = struct.unpack("<II", tail)
    if kind not in (0, 1) or channels < 1 or (kind == 0 and channels != 1):
        raise ParseError(f"bad channel/kind fields ({channels}, {kind})", path, offset=68)
    n = dims[0] * dims[1] * dims[2] * channels
    _check_payload(data, n * 4, path)
    dtype = "<i4" if kind == 0 else "<f4"
    values = _from_x_fastest(np.frombuffer(data, dtype=dtype, offset=HEADER_SIZE), dims, channels)
    try:
        if kind == 0:
            return VoxelGrid(dims, origin, spacing, values[..., 0].astype(np.int64), "labels")
        return VoxelGrid(dims, origin, spacing, values.astype(np.float64), "probabilities")
    except ValidationError as exc:
        raise ParseError(str(exc), path) from None


# -- per-vertex fields ----------------------------------------------------------------

def write_field(field: VertexField, path) -> None:
    """One vertex per line, full double precision; a count header comes first."""
    vals = np.asarray(field.values, dtype=np.float64)
    rows = vals.reshape(len(vals), -1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# vertices {len(rows)} columns {rows.shape[1]}\n")
        fh.writelines(" ".join(repr(v) for v in row) + "\n" for row in rows.tolist())


def read_field(path, mesh: TriangleMesh | None = None) -> VertexField:
    rows, expect, cols = [], None, None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 4 and parts[0] == "vertices" and parts[2] == "columns":
                    expect, cols = int(parts[1]), int(parts[3])
                continue
            try:
                row = [float(v) for v in line.split()]
            except ValueError as exc:
                raise ParseError(f"bad field value: {exc}", path, lineno) from None
            if cols is None:
                cols = len(row)
            if len(row) != cols:
                raise ParseError(f"expected {cols} values, got {len(row)}", path, lineno)
            rows.append(row)
    if expect is not None and len(rows) != expect:
        raise TruncatedFileError(f"header declares {expect} vertices, file has {len(rows)}", path)
    values = np.array(rows, dtype=np.float64)
    if cols == 1:
        values = values[:, 0]
    if mesh is not None:
        return VertexField.on(mesh, values) if len(values) == mesh.n_vertices else _count_error(
            len(values), mesh, path)
    return VertexField(values, len(values))


def _count_error(n, mesh, path):
    raise ValidationError(f"{path}: field has {n} values, mesh has {mesh.n_vertices} vertices")


# -- run configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class Option:
    key: str
    kind: str  # str | int | float | choice | stages | path
    default: object
    help: str
    choices: tuple = ()


def _stage_text(plan) -> str:
    return ", ".join(f"{s.target}:{s.dims[0]}:{s.iterations}:{s.step_size!r}" for s in plan)


OPTIONS = (
    Option("template", "path", None, "template mesh (default: icosphere of template_level)"),
    Option("template_level", "int", 4, "icosphere level when no template file is given"),
    Option("white_target", "path", None, "white target mesh"),
    Option("pial_target", "path", None, "pial target mesh"),
    Option("output_dir", "path", "out", "directory for fit outputs"),
    Option("stages", "stages", _stage_text(FitConfig().stage_plan),
           "stage plan: comma list of target:grid:iterations:step (step 'none' = base_step)"),
    Option("base_step", "float", 1e-4, "Adam step size for stages without their own"),
    Option("smoothness_weight", "float", 0.1, "weight of the grid-Laplacian penalty on the SVF"),
    Option("margin", "float", 0.15, "grid padding as a fraction of the mesh extent"),
    Option("patience", "int", 50, "early-stopping window (iterations)"),
    Option("min_improvement", "float", 1e-5, "relative improvement required over the window"),
    Option("divergence_factor", "float", 10.0, "abort a stage when the loss exceeds this x initial"),
    Option("init_noise", "float", 0.0, "std of random initial node vectors"),
    Option("checkpoint_every", "int", 0, "write the stage SVF every K iterations (0: off)"),
    Option("step_count", "int", 30, "integration steps over the unit time horizon"),
    Option("method", "choice", "rk4", "integrator", ("rk4", "euler")),
    Option("time_horizon", "float", 1.0, "integration time"),
    Option("lambda1", "float", 1.0, "edge-length loss weight"),
    Option("lambda2", "float", 1e-3, "segmentation loss weight"),
    Option("percentile", "float", 90.0, "Hausdorff percentile"),
    Option("si_method", "choice", "bvh", "self-intersection search", ("bvh", "brute")),
    Option("max_pairs", "int", 100, "intersecting pairs listed in reports"),
    Option("threads", "int", 1, "worker threads for spatial queries"),
    Option("seed", "int", 0, "random seed"),
)
_BY_KEY = {o.key: o for o in OPTIONS}


def parse_stages(text: str) -> tuple:
    plan = []
    counts = {"white": 0, "pial": 0}
    for item in text.split(","):
        parts = [p.strip() for p in item.split(":")]
        if len(parts) != 4:
            raise ValueError(f"stage entry {item.strip()!r} is not target:grid:iterations:step")
        target, grid, its, step = parts
        if target not in counts:
            raise ValueError(f"stage target {target!r} is not white or pial")
        counts[target] += 1
        n = int(grid)
        plan.append(StageSpec(f"{target}-{counts[target]}", target, (n, n, n), int(its),
                              None if step.lower() == "none" else float(step)))
    return tuple(plan)


def _convert(opt: Option, text: str):
    if opt.kind in ("str", "path"):
        return text
    if opt.kind == "int":
        return int(text)
    if opt.kind == "float":
        v = float(text)
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        return v
    if opt.kind == "choice":
        if text not in opt.choices:
            raise ValueError(f"expected one of {opt.choices}")
        return text
    if opt.kind == "stages":
        parse_stages(text)
        return text
    raise AssertionError(opt.kind)


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({o.key: o.default for o in OPTIONS})

    def __getitem__(self, key):
        return self.values[key]

    def updated(self, **overrides) -> "RunConfig":
        merged = dict(self.values)
        for key, value in overrides.items():
            if key not in _BY_KEY:
                raise ConfigError(f"unknown configuration key {key!r}")
            merged[key] = value
        return RunConfig(merged)

    def integration(self) -> IntegrationConfig:
        return IntegrationConfig(self["step_count"], self["method"], self["time_horizon"])

    def weights(self) -> LossWeights:
        return LossWeights(self["lambda1"], self["lambda2"])

    def fit_config(self) -> FitConfig:
        try:
            return FitConfig(
                stage_plan=parse_stages(self["stages"]), base_step=self["base_step"],
                weights=self.weights(), smoothness_weight=self["smoothness_weight"],
                integration=self.integration(), seed=self["seed"], init_noise=self["init_noise"],
                margin=self["margin"], patience=self["patience"],
                min_improvement=self["min_improvement"], divergence_factor=self["divergence_factor"],
                checkpoint_every=self["checkpoint_every"])
        except (ValidationError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def read_config(path) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    cfg = RunConfig.defaults()
    seen = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, text = (s.strip() for s in line.split("=", 1))
            if key not in _BY_KEY:
                raise ConfigError(f"{path}: line {lineno}: unknown configuration key {key!r}")
            if key in seen:
                raise ConfigError(f"{path}: line {lineno}: key {key!r} already set on line {seen[key]}")
            seen[key] = lineno
            try:
                cfg.values[key] = _convert(_BY_KEY[key], text)
            except ValueError as exc:
                raise ConfigError(f"{path}: line {lineno}: bad value for {key!r}: {exc}") from None
    return cfg


def write_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for opt in OPTIONS:
            value = cfg.values.get(opt.key)
            if value is None:
                continue
            fh.write(f"# {opt.help}\n{opt.key} = {value!r}\n" if isinstance(value, float)
                     else f"# {opt.help}\n{opt.key} = {value}\n")


def defaults_table() -> str:
    """Markdown table of every configuration key with its default."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    rows += [f"| `{o.key}` | `{o.default}` | {o.help} |" for o in OPTIONS]
    return "\n".join(rows)

