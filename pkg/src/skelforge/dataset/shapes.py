"""Procedural shapes with analytic skeletons, and a small point-splat renderer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry.marching import marching_cubes
from ..geometry.mesh import sample_surface
from ..geometry.types import Camera, GeometryError, Label, PointSet, TriangleMesh, VoxelGrid, grid_centers
from .skeleton import build_gt_volume

KINDS = ("torus", "box_frame", "table", "sphere")

# documented parameter ranges: name -> (low, high, default)
PARAM_RANGES: dict[str, dict[str, tuple[float, float, float]]] = {
    "torus": {"R": (0.15, 0.35, 0.3), "rho": (0.04, 0.14, 0.1)},
    "sphere": {"radius": (0.1, 0.45, 0.35)},
    "box_frame": {"half_size": (0.15, 0.38, 0.3), "bar": (0.02, 0.07, 0.05)},
    "table": {
        "top_x": (0.2, 0.42, 0.38),
        "top_z": (0.2, 0.42, 0.3),
        "top_y": (0.0, 0.3, 0.15),
        "thickness": (0.025, 0.06, 0.04),
        "legs": (3, 6, 4),
        "leg": (0.025, 0.05, 0.035),
    },
}

LEG_BOTTOM = -0.42


@dataclass
class ShapeSample:
    kind: str
    params: dict
    mesh: TriangleMesh
    views: list[tuple[np.ndarray, Camera]]
    gt_skeleton: PointSet
    gt_volume: VoxelGrid
    gt_surface: PointSet
    name: str = ""
    extra: dict = field(default_factory=dict)


def _canonical_kind(kind: str) -> str:
    k = kind.lower().replace("-", "_")
    aliases = {"boxframe": "box_frame", "multilegtable": "table", "multi_leg_table": "table"}
    k = aliases.get(k, k)
    if k not in KINDS:
        raise GeometryError(f"unknown shape kind {kind!r}; expected one of {KINDS}")
    return k


def validate_params(kind: str, params: dict | None) -> dict:
    """Fill defaults and check every value against its documented range."""
    kind = _canonical_kind(kind)
    ranges = PARAM_RANGES[kind]
    params = dict(params or {})
    unknown = set(params) - set(ranges)
    if unknown:
        raise GeometryError(f"unknown {kind} parameter(s): {sorted(unknown)}")
    out = {}
    for name, (lo, hi, default) in ranges.items():
        v = params.get(name, default)
        if not np.isfinite(v) or not lo <= v <= hi:
            raise GeometryError(f"{kind}.{name}={v} outside [{lo}, {hi}]")
        out[name] = v
    if kind == "torus":
        if out["rho"] >= out["R"]:
            raise GeometryError("torus tube radius must be smaller than the ring radius")
        if out["R"] + out["rho"] > 0.47:
            raise GeometryError("torus does not fit in the unit cube")
    elif kind == "box_frame":
        if out["bar"] >= 0.5 * out["half_size"]:
            raise GeometryError("box frame bars too thick for the frame size")
        if out["half_size"] + out["bar"] > 0.45:
            raise GeometryError("box frame does not fit in the unit cube")
    elif kind == "table":
        out["legs"] = int(out["legs"])
        if out["top_y"] + out["thickness"] > 0.45:
            raise GeometryError("table top does not fit in the unit cube")
    return out


def random_params(kind: str, rng: np.random.Generator) -> dict:
    """Uniformly drawn valid parameters."""
    kind = _canonical_kind(kind)
    ranges = PARAM_RANGES[kind]
    for _ in range(1000):
        p = {n: float(rng.uniform(lo, hi)) for n, (lo, hi, _) in ranges.items()}
        if kind == "table":
            p["legs"] = int(rng.integers(3, 7))
        try:
            return validate_params(kind, p)
        except GeometryError:
            continue
    raise GeometryError(f"could not draw valid {kind} parameters")


# -- meshes -------------------------------------------------------------------
def torus_mesh(R: float, rho: float, n_ring: int = 64, n_tube: int = 32) -> TriangleMesh:
    """Ring in the xz-plane around the y axis."""
    u = 2 * np.pi * np.arange(n_ring) / n_ring
    v = 2 * np.pi * np.arange(n_tube) / n_tube
    uu, vv = np.meshgrid(u, v, indexing="ij")
    rad = R + rho * np.cos(vv)
    verts = np.stack([rad * np.cos(uu), rho * np.sin(vv), rad * np.sin(uu)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_ring), np.arange(n_tube), indexing="ij")
    a = i * n_tube + j
    b = ((i + 1) % n_ring) * n_tube + j
    c = ((i + 1) % n_ring) * n_tube + (j + 1) % n_tube
    d = i * n_tube + (j + 1) % n_tube
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return _outward(TriangleMesh(verts, faces))


def icosphere(radius: float, subdivisions: int = 3) -> TriangleMesh:
    t = (1 + 5**0.5) / 2
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
             [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
             [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
             [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    v = np.array(verts, dtype=np.float64)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mids = len(v) + inv.reshape(3, -1).T
        v = np.concatenate([v, 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])])
        a, b, c = f.T
        ab, bc, ca = mids.T
        f = np.concatenate([np.stack(x, -1) for x in ([a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca])])
    v = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    return _outward(TriangleMesh(v, f))


def _outward(mesh: TriangleMesh) -> TriangleMesh:
    if mesh.signed_volume() < 0:
        return TriangleMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def _sdf_box(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
    q = np.abs(p - c) - h
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)


def _mesh_from_boxes(boxes: list[tuple[np.ndarray, np.ndarray]], resolution: int) -> TriangleMesh:
    pts = grid_centers(resolution)
    sdf = np.min([_sdf_box(pts, np.asarray(lo), np.asarray(hi)) for lo, hi in boxes], axis=0)
    h = 1.0 / resolution
    occ = np.clip(0.5 - 0.5 * sdf / h, 0.0, 1.0)
    return marching_cubes(VoxelGrid(occ))


def _cube_edges(a: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """The 12 edges of the cube [-a, a]^3 as (start, end) pairs."""
    edges = []
    for axis in range(3):
        o1, o2 = [k for k in range(3) if k != axis]
        for s1 in (-a, a):
            for s2 in (-a, a):
                p, q = np.zeros(3), np.zeros(3)
                p[axis], q[axis] = -a, a
                p[o1] = q[o1] = s1
                p[o2] = q[o2] = s2
                edges.append((p, q))
    return edges


def _segment_points(p, q, spacing: float) -> np.ndarray:
    n = max(2, int(np.ceil(np.linalg.norm(q - p) / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * p + t * q


def table_leg_positions(p: dict) -> np.ndarray:
    n = p["legs"]
    ang = 2 * np.pi * np.arange(n) / n + np.pi / 4
    inset = 0.8
    return np.stack([inset * (p["top_x"] - p["leg"]) * np.cos(ang), inset * (p["top_z"] - p["leg"]) * np.sin(ang)], 1)


def shape_geometry(kind: str, p: dict, mesh_resolution: int = 96, spacing: float = 0.006):
    """Mesh and labelled analytic skeleton for validated parameters."""
    if kind == "torus":
        mesh = torus_mesh(p["R"], p["rho"])
        n = int(np.ceil(2 * np.pi * p["R"] / spacing))
        th = 2 * np.pi * np.arange(n) / n
        pts = np.stack([p["R"] * np.cos(th), np.zeros(n), p["R"] * np.sin(th)], 1)
        return mesh, PointSet(pts, None, np.full(n, Label.CURVE))
    if kind == "sphere":
        mesh = icosphere(p["radius"])
        # the medial axis of a ball is its centre; a tiny curve cluster keeps it sampleable
        s = np.linspace(-0.01, 0.01, 16)
        pts = np.stack([s, np.zeros_like(s), np.zeros_like(s)], 1)
        return mesh, PointSet(pts, None, np.full(len(pts), Label.CURVE))
    if kind == "box_frame":
        a, w = p["half_size"], p["bar"]
        boxes = []
        for s, e in _cube_edges(a):
            boxes.append((np.minimum(s, e) - w, np.maximum(s, e) + w))
        mesh = _mesh_from_boxes(boxes, mesh_resolution)
        pts = np.concatenate([_segment_points(s, e, spacing) for s, e in _cube_edges(a)])
        pts = np.unique(np.round(pts, 12), axis=0)
        return mesh, PointSet(pts, None, np.full(len(pts), Label.CURVE))
    if kind == "table":
        tx, tz, ty, t, lw = p["top_x"], p["top_z"], p["top_y"], p["thickness"], p["leg"]
        boxes = [(np.array([-tx, ty - t, -tz]), np.array([tx, ty + t, tz]))]
        legs = table_leg_positions(p)
        for x, z in legs:
            boxes.append((np.array([x - lw, LEG_BOTTOM, z - lw]), np.array([x + lw, ty, z + lw])))
        mesh = _mesh_from_boxes(boxes, mesh_resolution)
        gx = np.arange(-tx + t, tx - t + 1e-9, spacing)
        gz = np.arange(-tz + t, tz - t + 1e-9, spacing)
        sx, sz = np.meshgrid(gx, gz, indexing="ij")
        sheet = np.stack([sx.ravel(), np.full(sx.size, ty), sz.ravel()], 1)
        curves = [_segment_points(np.array([x, LEG_BOTTOM + lw, z]), np.array([x, ty - t, z]), spacing) for x, z in legs]
        curve = np.concatenate(curves)
        pts = np.concatenate([curve, sheet])
        lab = np.concatenate([np.full(len(curve), Label.CURVE), np.full(len(sheet), Label.SHEET)])
        return mesh, PointSet(pts, None, lab)
    raise GeometryError(f"unknown shape kind {kind!r}")


# -- rendering ----------------------------------------------------------------
_ALBEDO = np.array([0.85, 0.6, 0.35])
_BACKGROUND = 1.0


def view_cameras(n_views: int, rng: np.random.Generator, size: int = 64, distance: float = 2.0, fov_deg: float = 40.0) -> list[Camera]:
    cams = []
    for _ in range(n_views):
        az = rng.uniform(0.0, 2 * np.pi)
        el = np.radians(rng.uniform(15.0, 35.0))
        eye = distance * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera.look_at(eye, size=size, fov_deg=fov_deg))
    return cams


def render(mesh: TriangleMesh, camera: Camera, n_points: int = 40000, seed=0) -> np.ndarray:
    """Flat-shaded RGB image (H, W, 3) in [0, 1] by z-buffered point splatting."""
    surf = sample_surface(mesh, n_points, seed)
    cam_pts = surf.points @ camera.rotation.T + camera.translation
    z = cam_pts[:, 2]
    ok = z > 1e-6
    u = np.rint(camera.fx * cam_pts[:, 0] / np.where(ok, z, 1) + camera.cx).astype(np.int64)
    v = np.rint(camera.fy * cam_pts[:, 1] / np.where(ok, z, 1) + camera.cy).astype(np.int64)
    ok &= (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    # light comes from over the viewer's upper left, fixed in camera space
    light = np.array([-0.4, -0.6, -1.0])
    light /= np.linalg.norm(light)
    n_cam = surf.normals @ camera.rotation.T
    shade = 0.25 + 0.75 * np.abs(n_cam @ light)
    img = np.full((camera.height, camera.width, 3), _BACKGROUND)
    idx = np.flatnonzero(ok)
    if len(idx):
        pix = v[idx] * camera.width + u[idx]
        order = np.lexsort((z[idx], pix))
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        win = idx[order[first]]
        img.reshape(-1, 3)[pix[order[first]]] = shade[win, None] * _ALBEDO
    return img


def generate_shape(
    kind: str,
    params: dict | None = None,
    seed: int = 0,
    n_views: int = 3,
    image_size: int = 64,
    resolution: int = 64,
    dilation_radius: int | None = None,
    n_surface: int = 10000,
    mesh_resolution: int = 96,
) -> ShapeSample:
    """Deterministic shape sample: mesh, renders, labelled skeleton, skeletal volume, surface samples."""
    kind = _canonical_kind(kind)
    p = validate_params(kind, params)
    if n_views < 1:
        raise GeometryError("at least one view is required")
    rng = np.random.default_rng(seed)
    mesh, skel = shape_geometry(kind, p, mesh_resolution)
    if not mesh.is_watertight():
        raise GeometryError(f"{kind} mesh is not watertight")
    cams = view_cameras(n_views, rng, size=image_size)
    views = [(render(mesh, c, seed=int(rng.integers(2**31))), c) for c in cams]
    surf = sample_surface(mesh, n_surface, int(rng.integers(2**31)))
    volume = build_gt_volume(skel, resolution, dilation_radius)
    return ShapeSample(kind, p, mesh, views, skel, volume, surf, name=f"{kind}_{seed}")
