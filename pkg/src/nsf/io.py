"""Mesh and point-cloud file formats.

OBJ: ASCII, ``v`` and ``f`` records only, triangles only (format v1).
PLY: ``binary_little_endian 1.0``; vertex element with float32
``x y z`` and optionally ``nx ny nz`` and uchar ``red green blue``;
face element ``property list uchar int vertex_indices``. The reader also
accepts ascii PLY and double/int vertex properties written by other tools.
"""
from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .geometry import PointCloud, TriMesh
from .validation import normalize_rows


class ParseError(ValueError):
    """Malformed input file; message carries the line or byte offset."""


# -- OBJ ----------------------------------------------------------------------

def save_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        fh.write("# nsf obj v1\n")
        if mesh.colors is not None:
            for v, c in zip(mesh.vertices, mesh.colors):
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        else:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def load_obj(path) -> TriMesh:
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    vals = [float(t) for t in tok[1:]]
                    if len(vals) not in (3, 4, 6, 7):
                        raise ParseError(f"line {lineno}: bad vertex record")
                    verts.append(vals[:3])
                    if len(vals) >= 6:
                        colors.append(vals[-3:])
                elif tok[0] == "f":
                    if len(tok) != 4:
                        raise ParseError(f"line {lineno}: non-triangular face")
                    idx = []
                    for t in tok[1:]:
                        i = int(t.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    faces.append(idx)
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
    c = np.array(colors) if colors and len(colors) == len(verts) else None
    try:
        return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), c)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# -- PLY ----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _vertex_table(points, normals, colors):
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(len(points), dtype=fields)
    for a, name in enumerate("xyz"):
        rec[name] = points[:, a]
    if normals is not None:
        for a, name in enumerate(("nx", "ny", "nz")):
            rec[name] = normals[:, a]
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        for a, name in enumerate(("red", "green", "blue")):
            rec[name] = rgb[:, a]
    return rec


def _header(n_vertices, vertex_fields, n_faces: Optional[int]) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", "comment nsf ply v1",
             f"element vertex {n_vertices}"]
    for name, dt in vertex_fields:
        lines.append(f"property {'uchar' if dt == 'u1' else 'float'} {name}")
    if n_faces is not None:
        lines += [f"element face {n_faces}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _write_ply(path, points, normals, colors, faces) -> None:
    rec = _vertex_table(points, normals, colors)
    header = _header(len(points), [(n, rec.dtype[n].str[1:]) for n in rec.dtype.names],
                     None if faces is None else len(faces))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())
        if faces is not None and len(faces):
            frec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            frec["n"] = 3
            frec["i"] = faces
            fh.write(frec.tobytes())


def save_ply(path, mesh: TriMesh, write_normals: bool = False) -> None:
    normals = None
    if write_normals:
        normals = mesh.normals if mesh.normals is not None else mesh.vertex_normals()
    _write_ply(path, mesh.vertices, normals, mesh.colors, mesh.faces)


def save_cloud_ply(path, cloud: PointCloud) -> None:
    _write_ply(path, cloud.points, cloud.normals, cloud.colors, None)


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("byte 0: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    offset = 0
    for line in lines:
        tok = line.split()
        here = offset
        offset += len(line) + 1
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"byte {here}: property before element")
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(f"byte {here}: unknown property type {tok[1]!r}")
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"byte {here}: unexpected header line {line!r}")
    if fmt not in ("binary_little_endian", "ascii"):
        raise ParseError(f"byte 0: unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _read_binary(data, elements, pos):
    out = {}
    for el in elements:
        props = el["props"]
        if all(len(p) == 2 for p in props):
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            need = dt.itemsize * el["count"]
            if pos + need > len(data):
                raise ParseError(f"byte {pos}: truncated {el['name']} element")
            out[el["name"]] = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
            pos += need
        elif len(props) == 1 and props[0][1] == "list":
            _, _, ct, it = props[0]
            cdt, idt = np.dtype("<" + ct), np.dtype("<" + it)
            # fast path: every list has length 3
            fixed = np.dtype([("n", cdt), ("i", idt, (3,))])
            need = fixed.itemsize * el["count"]
            rec = None
            if pos + need <= len(data):
                rec = np.frombuffer(data, dtype=fixed, count=el["count"], offset=pos)
            if rec is not None and np.all(rec["n"] == 3):
                out[el["name"]] = rec["i"].astype(np.int64)
                pos += need
            else:
                rows = []
                for r in range(el["count"]):
                    if pos + cdt.itemsize > len(data):
                        raise ParseError(f"byte {pos}: truncated face list")
                    n = int(np.frombuffer(data, cdt, 1, pos)[0])
                    pos += cdt.itemsize
                    if n != 3:
                        raise ParseError(f"byte {pos}: non-triangular face")
                    if pos + 3 * idt.itemsize > len(data):
                        raise ParseError(f"byte {pos}: truncated face list")
                    rows.append(np.frombuffer(data, idt, 3, pos))
                    pos += 3 * idt.itemsize
                out[el["name"]] = np.array(rows, dtype=np.int64).reshape(-1, 3)
        else:
            raise ParseError(f"byte {pos}: unsupported element layout {el['name']!r}")
    return out


def _read_ascii(data, elements, pos):
    lines = data[pos:].decode("ascii").splitlines()
    out = {}
    li = 0
    for el in elements:
        props = el["props"]
        rows = []
        for _ in range(el["count"]):
            if li >= len(lines):
                raise ParseError(f"line {li}: truncated {el['name']} element")
            vals = lines[li].split()
            li += 1
            if len(props) == 1 and props[0][1] == "list":
                if int(vals[0]) != 3:
                    raise ParseError(f"line {li}: non-triangular face")
                rows.append([int(v) for v in vals[1:4]])
            else:
                rows.append([float(v) for v in vals[: len(props)]])
        if len(props) == 1 and props[0][1] == "list":
            out[el["name"]] = np.array(rows, dtype=np.int64).reshape(-1, 3)
        else:
            arr = np.array(rows, dtype=np.float64).reshape(-1, len(props))
            rec = np.zeros(len(arr), dtype=[(p[0], "f8") for p in props])
            for k, p in enumerate(props):
                rec[p[0]] = arr[:, k]
            out[el["name"]] = rec
    return out


def _read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, pos = _parse_header(data)
    tables = _read_binary(data, elements, pos) if fmt == "binary_little_endian" else _read_ascii(data, elements, pos)
    if "vertex" not in tables:
        raise ParseError("byte 0: PLY has no vertex element")
    v = tables["vertex"]
    names = v.dtype.names
    points = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    normals = colors = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        normals = normalize_rows(normals)
    if all(n in names for n in ("red", "green", "blue")):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64)
        if v["red"].dtype.kind == "u":
            colors = colors / 255.0
    return points, normals, colors, tables.get("face")


def load_ply(path) -> TriMesh:
    points, normals, colors, faces = _read_ply(path)
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    try:
        return TriMesh(points, faces, colors, normals)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def load_cloud_ply(path) -> PointCloud:
    points, normals, colors, _ = _read_ply(path)
    return PointCloud(points, normals, colors)


def load_mesh(path) -> TriMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return load_obj(path)
    if ext == ".ply":
        return load_ply(path)
    raise ValueError(f"unsupported mesh format {ext!r}")


def save_mesh(path, mesh: TriMesh) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        save_obj(path, mesh)
    elif ext == ".ply":
        save_ply(path, mesh)
    else:
        raise ValueError(f"unsupported mesh format {ext!r}")
