"""Mesh, point-set and volume files.

* OBJ: ASCII ``v``/``f`` records; polygons are fan-triangulated on read.
* PLY: binary little-endian.  Vertices carry ``x y z`` (double) and
  optionally ``nx ny nz`` (double) and ``label`` (uchar); faces are
  ``list uchar int vertex_indices``.
* SKV1 volume: 16-byte header ``b"SKV1", u32 resolution, u32 version (1),
  u32 reserved (0)`` followed by ``r^3`` float32 values, x fastest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .types import GeometryError, PointSet, TriangleMesh, VoxelGrid

VOLUME_MAGIC = b"SKV1"


# -- OBJ ---------------------------------------------------------------------
def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


# -- PLY ---------------------------------------------------------------------
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def write_ply(path, points: PointSet | None = None, mesh: TriangleMesh | None = None) -> None:
    """Write a point set (with optional normals/labels) or a mesh as binary PLY."""
    if (points is None) == (mesh is None):
        raise ValueError("pass exactly one of points= or mesh=")
    if mesh is not None:
        verts, normals, labels, faces = mesh.vertices, None, None, mesh.faces
    else:
        verts, normals, labels, faces = points.points, points.normals, points.labels, None
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(verts)}"]
    header += ["property double x", "property double y", "property double z"]
    if normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        header += ["property double nx", "property double ny", "property double nz"]
    if labels is not None:
        fields += [("label", "u1")]
        header += ["property uchar label"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    rec = np.zeros(len(verts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = verts[:, 0], verts[:, 1], verts[:, 2]
    if normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = normals[:, 0], normals[:, 1], normals[:, 2]
    if labels is not None:
        rec["label"] = labels
    body = [("\n".join(header) + "\n").encode("ascii"), rec.tobytes()]
    if faces is not None:
        frec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        frec["n"] = 3
        frec["idx"] = faces
        body.append(frec.tobytes())
    Path(path).write_bytes(b"".join(body))


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise GeometryError("not a PLY file")
    stop = data.index(b"\n", end) + 1
    elements = []
    for line in data[:end].decode("ascii").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise GeometryError(f"unsupported PLY format {parts[1]}")
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    return elements, stop


def read_ply(path) -> PointSet | TriangleMesh:
    """Read a binary PLY; returns a TriangleMesh if faces are present, else a PointSet."""
    data = Path(path).read_bytes()
    elements, pos = _parse_ply_header(data)
    verts = normals = labels = faces = None
    for name, count, props in elements:
        if name == "face":
            faces = []
            for _ in range(count):
                (_, kind, ctype, itype) = props[0]
                n = np.frombuffer(data, dtype=ctype, count=1, offset=pos)[0]
                pos += np.dtype(ctype).itemsize
                idx = np.frombuffer(data, dtype=itype, count=int(n), offset=pos)
                pos += np.dtype(itype).itemsize * int(n)
                for k in range(1, int(n) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            continue
        dtype = np.dtype([(p[0], p[1]) for p in props])
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += dtype.itemsize * count
        if name == "vertex":
            verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            if "nx" in dtype.names:
                normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
            if "label" in dtype.names:
                labels = rec["label"].astype(np.int64)
    if verts is None:
        raise GeometryError(f"{path}: no vertex element")
    if faces is not None:
        return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))
    return PointSet(verts, normals, labels)


# -- SKV1 volumes ------------------------------------------------------------
def write_volume(path, grid: VoxelGrid) -> None:
    r = grid.resolution
    header = VOLUME_MAGIC + struct.pack("<III", r, 1, 0)
    body = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + body)


def read_volume(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    if data[:4] != VOLUME_MAGIC:
        raise GeometryError(f"{path}: bad volume magic {data[:4]!r}")
    r, _version, _ = struct.unpack_from("<III", data, 4)
    expected = 16 + 4 * r**3
    if len(data) != expected:
        raise GeometryError(f"{path}: expected {expected} bytes for resolution {r}, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=16).reshape((r, r, r), order="F")
    return VoxelGrid(np.clip(vals.astype(np.float64), 0.0, 1.0))
