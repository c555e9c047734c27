"""Triangle-mesh utilities: surface sampling, topology counts, inside tests."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .types import GeometryError, PointSet, TriangleMesh, VoxelGrid, grid_centers


def sample_faces(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted face indices and uniform barycentric weights ``(n,), (n, 3)``."""
    if n <= 0:
        raise GeometryError(f"number of samples must be positive, got {n}")
    areas = mesh.face_areas() if mesh.num_faces else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise GeometryError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return face, bary


def sample_surface(mesh: TriangleMesh, n: int, seed=0) -> PointSet:
    """``n`` area-weighted surface points carrying their face normals."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    face, bary = sample_faces(mesh, n, rng)
    tri = mesh.triangles()[face]
    pts = np.einsum("nk,nkd->nd", bary, tri)
    return PointSet(pts, mesh.face_normals()[face])


def euler_characteristic(mesh: TriangleMesh) -> int:
    """V - E + F, counting only vertices referenced by a face."""
    if mesh.is_empty():
        return 0
    v = len(np.unique(mesh.faces))
    return int(v - len(mesh.edges) + mesh.num_faces)


def vertex_components(mesh: TriangleMesh) -> tuple[int, np.ndarray]:
    e = mesh.edges
    n = mesh.num_vertices
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return connected_components(adj, directed=False)


def num_components(mesh: TriangleMesh) -> int:
    if mesh.is_empty():
        return 0
    _, labels = vertex_components(mesh)
    return len(np.unique(labels[mesh.faces[:, 0]]))


def genus(mesh: TriangleMesh) -> int:
    if not mesh.is_watertight():
        raise GeometryError("genus needs a closed mesh")
    if num_components(mesh) != 1:
        raise GeometryError("genus needs a connected mesh")
    chi = euler_characteristic(mesh)
    return (2 - chi) // 2


def compact(vertices: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    """Drop unreferenced vertices and renumber faces."""
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(vertices[used], remap[faces])


def largest_component(mesh: TriangleMesh) -> TriangleMesh:
    """The connected component with the most faces."""
    if mesh.is_empty():
        return mesh
    _, labels = vertex_components(mesh)
    face_lab = labels[mesh.faces[:, 0]]
    keep = np.bincount(face_lab).argmax()
    return compact(mesh.vertices, mesh.faces[face_lab == keep])


def vertex_adjacency(mesh: TriangleMesh) -> sp.csr_matrix:
    e = mesh.edges
    n = mesh.num_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


# tiny (y, z) ray offsets keep rays off shared edges and vertices
_RAY_OFFSETS = np.array(
    [
        [1.41421356e-7, 1.73205081e-7],
        [-2.23606798e-7, 1.04719755e-7],
        [1.35914091e-7, -2.64575131e-7],
    ]
)


def _ray_parity(tri: np.ndarray, pts: np.ndarray, offset: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Parity of +x ray crossings from each point (after a small yz offset)."""
    out = np.zeros(len(pts), dtype=np.int64)
    if len(tri) == 0 or len(pts) == 0:
        return out
    yz = tri[:, :, 1:]
    lo = yz.min(axis=(0, 1))
    hi = yz.max(axis=(0, 1))
    g = int(np.clip(np.sqrt(len(tri)), 8, 256))
    cell = np.maximum((hi - lo) / g, 1e-12)
    tmin = np.clip(np.floor((yz.min(axis=1) - lo) / cell).astype(np.int64), 0, g - 1)
    tmax = np.clip(np.floor((yz.max(axis=1) - lo) / cell).astype(np.int64), 0, g - 1)
    span = tmax - tmin + 1
    counts = span[:, 0] * span[:, 1]
    tri_rep = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cy = tmin[tri_rep, 0] + local // span[tri_rep, 1]
    cz = tmin[tri_rep, 1] + local % span[tri_rep, 1]
    cell_id = cy * g + cz
    order = np.argsort(cell_id, kind="stable")
    cell_tris = tri_rep[order]
    cell_start = np.searchsorted(cell_id[order], np.arange(g * g + 1))

    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    det = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (b[:, 2] - a[:, 2]) * (c[:, 1] - a[:, 1])

    for s in range(0, len(pts), chunk):
        p = pts[s : s + chunk]
        py = p[:, 1] + offset[0]
        pz = p[:, 2] + offset[1]
        inb = (py >= lo[0]) & (py <= hi[0]) & (pz >= lo[1]) & (pz <= hi[1])
        pid = np.flatnonzero(inb)
        if not len(pid):
            continue
        pcy = np.clip(np.floor((py[pid] - lo[0]) / cell[0]).astype(np.int64), 0, g - 1)
        pcz = np.clip(np.floor((pz[pid] - lo[1]) / cell[1]).astype(np.int64), 0, g - 1)
        pc = pcy * g + pcz
        n_c = cell_start[pc + 1] - cell_start[pc]
        pair_p = np.repeat(pid, n_c)
        base = np.repeat(cell_start[pc], n_c)
        pair_local = np.arange(n_c.sum()) - np.repeat(np.cumsum(n_c) - n_c, n_c)
        pair_t = cell_tris[base + pair_local]
        qy, qz = py[pair_p], pz[pair_p]
        ta, tb, tc, d = a[pair_t], b[pair_t], c[pair_t], det[pair_t]
        ok = np.abs(d) > 1e-18
        dsafe = np.where(ok, d, 1.0)
        l_a = ((tb[:, 1] - qy) * (tc[:, 2] - qz) - (tb[:, 2] - qz) * (tc[:, 1] - qy)) / dsafe
        l_b = ((tc[:, 1] - qy) * (ta[:, 2] - qz) - (tc[:, 2] - qz) * (ta[:, 1] - qy)) / dsafe
        l_c = 1.0 - l_a - l_b
        hit = ok & (l_a >= 0) & (l_b >= 0) & (l_c >= 0)
        xh = l_a * ta[:, 0] + l_b * tb[:, 0] + l_c * tc[:, 0]
        hit &= xh > p[pair_p, 0]
        out[s : s + chunk] += np.bincount(pair_p[hit], minlength=len(p))
    return out % 2


def points_inside(mesh: TriangleMesh, points, n_rays: int = 3) -> np.ndarray:
    """Ray-parity inside test along +x with a majority vote over slightly offset rays."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    votes = np.zeros(len(pts), dtype=np.int64)
    for k in range(n_rays):
        votes += _ray_parity(tri, pts, _RAY_OFFSETS[k % len(_RAY_OFFSETS)] * (1 + k // len(_RAY_OFFSETS)))
    return 2 * votes > n_rays


def voxelize_mesh(mesh: TriangleMesh, resolution: int = 64) -> VoxelGrid:
    """Binary occupancy of voxel centres inside a closed mesh."""
    centers = grid_centers(resolution).reshape(-1, 3)
    inside = points_inside(mesh, centers)
    return VoxelGrid(inside.reshape((resolution,) * 3).astype(np.float64))
