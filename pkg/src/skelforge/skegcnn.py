"""Explicit surface recovery: inflate the isosurface of a skeletal volume with a graph network.

The initial mesh comes from marching cubes on the skeletal volume.  A GCN
reads, per vertex, image features lifted at the vertex's projection plus
its coordinates, and predicts an offset.  Connectivity never changes, so
the deformed mesh keeps the topology of the initial one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import tensor as T
from .autodiff.nn import ParamStore, glorot
from .autodiff.tensor import ShapeError, Tensor
from .geometry.camera import lift_features
from .geometry.chamfer import chamfer, curvature_weights, nearest, weighted_chamfer
from .geometry.marching import marching_cubes
from .geometry.mesh import euler_characteristic, largest_component, num_components, sample_faces, sample_surface, vertex_adjacency
from .geometry.types import ORIGIN, Camera, GeometryError, PointSet, TriangleMesh, VoxelGrid


@dataclass(frozen=True)
class GCNConfig:
    layers: int = 6
    hidden: int = 192
    n_samples: int = 2048
    lambda1: float = 0.7
    lambda2: float = 3e-4
    max_vertices: int = 10_000
    iso: float = 0.5


# -- initial mesh ---------------------------------------------------------------------
def cluster_vertices(mesh: TriangleMesh, cell: float) -> TriangleMesh:
    """Uniform vertex clustering: vertices sharing a ``cell``-sized grid cell merge into their mean."""
    key = np.floor((mesh.vertices - ORIGIN) / cell).astype(np.int64)
    _, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    n = inv.max() + 1
    counts = np.bincount(inv, minlength=n).astype(np.float64)
    verts = np.stack([np.bincount(inv, weights=mesh.vertices[:, k], minlength=n) for k in range(3)], axis=1) / counts[:, None]
    faces = inv[mesh.faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    # drop faces that collapsed onto an already present triangle
    _, first = np.unique(np.sort(faces, axis=1), axis=0, return_index=True)
    faces = faces[np.sort(first)]
    used = np.unique(faces)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[faces])


def _same_topology(a: TriangleMesh, b: TriangleMesh) -> bool:
    if b.is_empty():
        return False
    if euler_characteristic(a) != euler_characteristic(b) or num_components(a) != num_components(b):
        return False
    return not a.is_watertight() or b.is_watertight()


def extract_initial_mesh(volume: VoxelGrid, iso: float = 0.5, max_vertices: int = 10_000) -> TriangleMesh:
    """Largest component of the ``iso`` level set, clustered down to ``max_vertices`` when possible.

    Clustering is only accepted when it keeps the Euler characteristic and
    the component count; otherwise the full marching-cubes mesh is returned.
    """
    v = volume.values
    lo, hi = float(v.min()), float(v.max())
    if not lo < iso < hi:
        raise GeometryError(f"iso {iso} outside the value range ({lo}, {hi}) of the volume")
    mesh = marching_cubes(volume, iso)
    if mesh.is_empty():
        raise GeometryError("empty isosurface")
    mesh = largest_component(mesh)
    if mesh.num_vertices <= max_vertices:
        return mesh
    cell = volume.voxel_size
    for _ in range(8):
        clustered = cluster_vertices(mesh, cell)
        if not _same_topology(mesh, clustered):
            break
        if clustered.num_vertices <= max_vertices:
            return clustered
        cell *= 1.25
    return mesh


# -- graph convolution ----------------------------------------------------------------------
def mean_adjacency(adjacency) -> sp.csr_matrix:
    """Row-normalised adjacency; isolated vertices get an empty row."""
    if isinstance(adjacency, TriangleMesh):
        adjacency = vertex_adjacency(adjacency)
    adj = sp.csr_matrix(adjacency, dtype=np.float64)
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.csr_matrix(sp.diags(inv) @ adj)


def gcn_layer(features, adjacency, w_self, w_neigh, b=None, activation: str = "relu") -> Tensor:
    """``act(W_self f_t + mean_{t' ~ t} W_neigh f_t' + b)``; ``adjacency`` may be pre-normalised."""
    f = T.as_tensor(features)
    ws, wn = T.as_tensor(w_self), T.as_tensor(w_neigh)
    if f.ndim != 2 or ws.shape[0] != f.shape[1] or wn.shape != ws.shape:
        raise ShapeError("gcn_layer", f.shape, ws.shape, wn.shape)
    avg = _normalised(adjacency)
    if avg.shape != (len(f), len(f)):
        raise ShapeError("gcn_layer", avg.shape, f.shape, detail="adjacency does not match vertex count")
    y = f @ ws + T.spmm(avg, f @ wn)
    if b is not None:
        y = y + b
    if activation == "relu":
        return T.relu(y)
    if activation in ("none", "identity", None):
        return y
    raise ValueError(f"unknown activation {activation!r}")


def _normalised(adjacency) -> sp.csr_matrix:
    # matrices built here are tagged so repeated layers skip the normalisation
    if getattr(adjacency, "_row_mean", False):
        return adjacency
    avg = mean_adjacency(adjacency)
    avg._row_mean = True
    return avg


class SkeGCNN:
    """``layers`` graph convolutions of width ``hidden``; the last one predicts a 3D offset and starts at zero."""

    def __init__(self, store: ParamStore, rng, feat_dim: int, hidden: int = 192, layers: int = 6, name: str = "gcn"):
        if layers < 1:
            raise ValueError("need at least one layer")
        self.feat_dim = feat_dim
        self.params = []
        prev = feat_dim
        for i in range(layers):
            last = i == layers - 1
            out = 3 if last else hidden
            shape = (prev, out)
            ws = np.zeros(shape) if last else glorot(rng, prev, out, shape)
            wn = np.zeros(shape) if last else glorot(rng, prev, out, shape)
            self.params.append(
                (store.add(f"{name}.l{i}.ws", ws), store.add(f"{name}.l{i}.wn", wn), store.add(f"{name}.l{i}.b", np.zeros(out)))
            )
            prev = out

    def __call__(self, features, adjacency) -> Tensor:
        x = T.as_tensor(features)
        if x.ndim != 2 or x.shape[1] != self.feat_dim:
            raise ShapeError("skegcnn", x.shape, detail=f"expected (n, {self.feat_dim}) features")
        avg = _normalised(adjacency)
        for i, (ws, wn, b) in enumerate(self.params):
            x = gcn_layer(x, avg, ws, wn, b, "relu" if i < len(self.params) - 1 else "none")
        return x


def vertex_features(mesh: TriangleMesh, views: Sequence[tuple[object, Camera]]) -> Tensor:
    """Lifted image features (mean over views) concatenated with vertex coordinates."""
    if not views:
        raise GeometryError("deform needs at least one (encoding, camera) pair")
    lifted = [lift_features(enc, cam, mesh.vertices) for enc, cam in views]
    feats = lifted[0]
    for extra in lifted[1:]:
        feats = feats + extra
    if len(lifted) > 1:
        feats = feats * (1.0 / len(lifted))
    return T.concat([feats, Tensor(mesh.vertices)], axis=1)


def deform(mesh: TriangleMesh, views, net: SkeGCNN, adjacency=None) -> tuple[TriangleMesh, Tensor]:
    """Deformed mesh and its differentiable vertex positions; faces are shared with ``mesh``.

    ``views`` is a list of ``(encoder output, camera)`` pairs, or a single pair.
    """
    if isinstance(views, tuple) and len(views) == 2 and isinstance(views[1], Camera):
        views = [views]
    adj = adjacency if adjacency is not None else _normalised(mesh)
    offsets = net(vertex_features(mesh, views), adj)
    verts = Tensor(mesh.vertices) + offsets
    return TriangleMesh(verts.values, mesh.faces), verts


# -- objective ---------------------------------------------------------------------
def sample_mesh_points(verts, faces: np.ndarray, n: int, rng) -> Tensor:
    """Area-weighted barycentric samples; each sample's gradient reaches its triangle's 3 vertices."""
    v = T.as_tensor(verts)
    face, bary = sample_faces(TriangleMesh(v.values, faces), n, rng)
    tri = faces[face]
    out = None
    for k in range(3):
        term = T.take_rows(v, tri[:, k]) * bary[:, k : k + 1]
        out = term if out is None else out + term
    return out


def _edges(mesh_or_edges) -> np.ndarray:
    return mesh_or_edges.edges if isinstance(mesh_or_edges, TriangleMesh) else np.asarray(mesh_or_edges, dtype=np.int64)


def edge_reg(verts, mesh_or_edges) -> Tensor:
    """Sum of squared edge lengths."""
    v = T.as_tensor(verts)
    e = _edges(mesh_or_edges)
    if len(e) == 0:
        return Tensor(np.array(0.0))
    d = T.take_rows(v, e[:, 0]) - T.take_rows(v, e[:, 1])
    return (d * d).sum()


def curvature_reg(verts, mesh_or_edges, gt: PointSet) -> Tensor:
    """Sum over edges ``(u, v)`` of ``<u - v, n>^2`` with ``n`` the normal of the ground-truth sample nearest to ``u``."""
    if gt.normals is None:
        raise GeometryError("curvature_reg needs ground-truth normals")
    v = T.as_tensor(verts)
    e = _edges(mesh_or_edges)
    if len(e) == 0:
        return Tensor(np.array(0.0))
    idx, _ = nearest(v.values[e[:, 0]], gt.points)
    d = T.take_rows(v, e[:, 0]) - T.take_rows(v, e[:, 1])
    proj = (d * gt.normals[idx]).sum(axis=1)
    return (proj * proj).sum()


def _gt_samples(gt, n: int = 10_000, seed: int = 0) -> PointSet:
    if isinstance(gt, TriangleMesh):
        return sample_surface(gt, n, seed)
    if not isinstance(gt, PointSet):
        raise GeometryError("ground truth must be a mesh or a point set with normals")
    return gt


def skegcnn_loss(
    verts,
    mesh: TriangleMesh,
    gt,
    lambda1: float = 0.7,
    lambda2: float = 3e-4,
    n_samples: int = 2048,
    rng=None,
    kappa: np.ndarray | None = None,
) -> Tensor:
    """Weighted chamfer of surface samples against ``gt`` plus the edge and curvature terms.

    ``gt`` is the target mesh or a sample of it with normals; ``kappa`` (per
    ground-truth point) defaults to the curvature weights of those samples.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    target = _gt_samples(gt)
    if kappa is None:
        kappa = curvature_weights(target)
    pts = sample_mesh_points(verts, mesh.faces, n_samples, rng)
    loss = weighted_chamfer(pts, target.points, kappa)
    if lambda1:
        loss = loss + edge_reg(verts, mesh) * lambda1
    if lambda2:
        loss = loss + curvature_reg(verts, mesh, target) * lambda2
    return loss


def mesh_chamfer(a: TriangleMesh, b, n: int = 10_000, seed: int = 0) -> float:
    """Mean chamfer between surface samples of two meshes (or a mesh and a point set)."""
    pa = sample_surface(a, n, seed).points
    pb = b.points if isinstance(b, PointSet) else sample_surface(b, n, seed + 1).points
    return chamfer(pa, pb, "mean").item()
