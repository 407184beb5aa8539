"""Reading and writing coloured meshes.

Two formats are supported:

* PLY, ascii or binary_little_endian, with per-vertex properties
  x y z red green blue (colours as uchar 0-255 or float 0-1).  This is
  the canonical format because it natively carries vertex colour.
* Extended OBJ with 6-value vertex lines ``v x y z r g b`` and 1-based
  ``f i j k`` faces, for interoperability.

Parse errors name the offending line or element.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import ColouredMesh, MeshError

_PLY_SCALARS = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}

_COLOUR_NAMES = {"red": 0, "green": 1, "blue": 2,
                 "r": 0, "g": 1, "b": 2}
_POSITION_NAMES = {"x": 0, "y": 1, "z": 2}


class MeshParseError(MeshError):
    pass


def detect_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix == ".obj":
        return "obj"
    raise MeshParseError(f"cannot infer mesh format from {path!r}")


def load_mesh(path, format=None) -> ColouredMesh:
    fmt = format or detect_format(path)
    if fmt == "ply":
        return _load_ply(path)
    if fmt == "obj":
        return _load_obj(path)
    raise MeshParseError(f"unknown mesh format {fmt!r}")


def save_mesh(mesh: ColouredMesh, path, format=None, binary=True):
    fmt = format or detect_format(path)
    if fmt == "ply":
        _save_ply(mesh, path, binary=binary)
    elif fmt == "obj":
        _save_obj(mesh, path)
    else:
        raise MeshParseError(f"unknown mesh format {fmt!r}")


# ---------------------------------------------------------------- PLY --

def _load_ply(path) -> ColouredMesh:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MeshParseError(f"{path}: not a PLY file (missing header)")
    end = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace")
    body = raw[end:]

    fmt = None
    elements = []  # (name, count, [(prop_name, type, is_list, idx_type)])
    for lineno, line in enumerate(header.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "end_header"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise MeshParseError(
                    f"{path}:{lineno}: unsupported PLY format {fmt!r}")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError(
                    f"{path}:{lineno}: property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], True, parts[2]))
            else:
                elements[-1][2].append((parts[2], parts[1], False, None))
        else:
            raise MeshParseError(
                f"{path}:{lineno}: unknown header keyword {parts[0]!r}")
    if fmt is None:
        raise MeshParseError(f"{path}: PLY header lacks a format line")

    vertex_props = {p[0] for name, _, props in elements if name == "vertex"
                    for p in props}
    has_colour = ({"red", "green", "blue"} <= vertex_props
                  or {"r", "g", "b"} <= vertex_props)
    if not has_colour:
        raise MeshParseError(
            f"{path}: vertex colour channels missing (need red/green/blue "
            f"properties, found {sorted(vertex_props)})")

    if fmt == "ascii":
        tokens = body.decode("ascii", errors="replace").split()
        data = _ply_read_ascii(path, tokens, elements)
    else:
        data = _ply_read_binary(path, body, elements)

    if "vertex" not in data or "face" not in data:
        raise MeshParseError(f"{path}: PLY needs vertex and face elements")
    positions, colours = data["vertex"]
    triangles = data["face"]
    try:
        return ColouredMesh(positions, colours, triangles)
    except MeshError as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def _colour_scale(type_name):
    # integer-typed colours are 8/16-bit counts; floats are already [0, 1]
    if type_name in ("uchar", "uint8", "char", "int8"):
        return 255.0
    if type_name in ("ushort", "uint16", "short", "int16"):
        return 65535.0
    return 1.0


def _ply_read_ascii(path, tokens, elements):
    data = {}
    pos = 0

    def take(count, what):
        nonlocal pos
        if pos + count > len(tokens):
            raise MeshParseError(f"{path}: unexpected end of data in {what}")
        vals = tokens[pos:pos + count]
        pos += count
        return vals

    for name, count, props in elements:
        if name == "vertex":
            positions = np.zeros((count, 3))
            colours = np.zeros((count, 3))
            for i in range(count):
                vals = take(len(props), f"vertex {i}")
                for (pname, ptype, is_list, _), v in zip(props, vals):
                    if is_list:
                        raise MeshParseError(
                            f"{path}: list property {pname!r} on vertices")
                    if pname in _POSITION_NAMES:
                        positions[i, _POSITION_NAMES[pname]] = float(v)
                    elif pname in _COLOUR_NAMES:
                        colours[i, _COLOUR_NAMES[pname]] = (
                            float(v) / _colour_scale(ptype))
            data["vertex"] = (positions, colours)
        elif name == "face":
            tris = []
            for i in range(count):
                k = int(take(1, f"face {i}")[0])
                idx = [int(v) for v in take(k, f"face {i}")]
                if k != 3:
                    raise MeshParseError(
                        f"{path}: face {i} has {k} vertices; only triangles "
                        "are supported")
                tris.append(idx)
            data["face"] = np.array(tris, dtype=np.int64).reshape(count, 3)
        else:
            for i in range(count):
                for pname, ptype, is_list, _ in props:
                    if is_list:
                        k = int(take(1, f"{name} {i}")[0])
                        take(k, f"{name} {i}")
                    else:
                        take(1, f"{name} {i}")
    return data


def _ply_read_binary(path, body, elements):
    data = {}
    off = 0
    for name, count, props in elements:
        if name == "vertex" and not any(p[2] for p in props):
            fields = [(f"f{k}", "<" + _PLY_SCALARS[p[1]][0])
                      for k, p in enumerate(props)]
            dtype = np.dtype(fields)
            size = dtype.itemsize
            if off + size * count > len(body):
                raise MeshParseError(
                    f"{path}: truncated vertex data at byte {off}")
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
            off += size * count
            positions = np.zeros((count, 3))
            colours = np.zeros((count, 3))
            for k, (pname, ptype, _, _) in enumerate(props):
                col = arr[arr.dtype.names[k]].astype(np.float64)
                if pname in _POSITION_NAMES:
                    positions[:, _POSITION_NAMES[pname]] = col
                elif pname in _COLOUR_NAMES:
                    colours[:, _COLOUR_NAMES[pname]] = col / _colour_scale(ptype)
            data["vertex"] = (positions, colours)
            continue
        rows = []
        for i in range(count):
            row = []
            for pname, ptype, is_list, idx_type in props:
                if is_list:
                    cfmt, csize = _PLY_SCALARS[idx_type]
                    if off + csize > len(body):
                        raise MeshParseError(
                            f"{path}: truncated at byte {off} in {name} {i}")
                    k = struct.unpack_from("<" + cfmt, body, off)[0]
                    off += csize
                    vfmt, vsize = _PLY_SCALARS[ptype]
                    vals = struct.unpack_from(f"<{k}{vfmt}", body, off)
                    off += vsize * k
                    row.extend(vals)
                else:
                    vfmt, vsize = _PLY_SCALARS[ptype]
                    row.append(struct.unpack_from("<" + vfmt, body, off)[0])
                    off += vsize
            rows.append(row)
        if name == "face":
            for i, row in enumerate(rows):
                if len(row) != 3:
                    raise MeshParseError(
                        f"{path}: face {i} has {len(row)} vertices; only "
                        "triangles are supported")
            data["face"] = np.array(rows, dtype=np.int64)
    return data


def _save_ply(mesh: ColouredMesh, path, binary=True):
    n, t = mesh.n_vertices, mesh.n_triangles
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
        "property double x", "property double y", "property double z",
        "property double red", "property double green", "property double blue",
        f"element face {t}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vert = np.hstack([mesh.positions, mesh.colours]).astype("<f8")
            fh.write(vert.tobytes())
            face = np.empty(t, dtype=np.dtype("<B, <3i4"))
            face["f0"] = 3
            face["f1"] = mesh.triangles.astype("<i4")
            fh.write(face.tobytes())
        else:
            for p, c in zip(mesh.positions, mesh.colours):
                fh.write((" ".join(f"{v:.17g}" for v in (*p, *c)) + "\n")
                         .encode("ascii"))
            for tri in mesh.triangles:
                fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode("ascii"))


# ---------------------------------------------------------------- OBJ --

def _load_obj(path) -> ColouredMesh:
    positions, colours, tris = [], [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) != 7:
                    raise MeshParseError(
                        f"{path}:{lineno}: vertex line needs 6 values "
                        f"(x y z r g b), got {len(parts) - 1}")
                try:
                    vals = [float(v) for v in parts[1:]]
                except ValueError as exc:
                    raise MeshParseError(
                        f"{path}:{lineno}: bad vertex value ({exc})") from exc
                positions.append(vals[:3])
                colours.append(vals[3:])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshParseError(
                        f"{path}:{lineno}: face line needs 3 indices, "
                        f"got {len(parts) - 1}")
                try:
                    idx = [int(v.split("/")[0]) for v in parts[1:]]
                except ValueError as exc:
                    raise MeshParseError(
                        f"{path}:{lineno}: bad face index ({exc})") from exc
                if any(i < 1 for i in idx):
                    raise MeshParseError(
                        f"{path}:{lineno}: OBJ indices are 1-based")
                tris.append([i - 1 for i in idx])
            # other OBJ statements (vn, vt, usemtl, ...) are ignored
    if not positions:
        raise MeshParseError(f"{path}: no vertices found")
    try:
        return ColouredMesh(np.array(positions), np.array(colours),
                            np.array(tris, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def _save_obj(mesh: ColouredMesh, path):
    with open(path, "w", encoding="ascii") as fh:
        for p, c in zip(mesh.positions, mesh.colours):
            fh.write("v " + " ".join(f"{v:.17g}" for v in (*p, *c)) + "\n")
        for tri in mesh.triangles:
            fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
