"""Nearest neighbours, Chamfer distances, Laplacian smoothing and curvature weights.

Losses accept point arrays, PointSets or Tensors and return scalar Tensors;
gradients flow into whichever inputs are Tensors with ``requires_grad``.
Nearest-neighbour assignments are treated as locally constant.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from ..autodiff import tensor as T
from ..autodiff.tensor import Tensor
from .types import GeometryError, PointSet

# pairs above this count go through the KD-tree instead of brute force
_BRUTE_FORCE_PAIRS = 4_000_000


def as_points(x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    elif isinstance(x, PointSet):
        t = Tensor(x.points)
    else:
        t = Tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    if t.ndim != 2 or t.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) point array, got {t.shape}")
    return t


def nearest_brute(query: np.ndarray, ref: np.ndarray, weights: np.ndarray | None = None, chunk: int = 512):
    """For each query point, argmin over ref of ``w_j * |q - r_j|^2``; lowest index wins ties.

    Returns ``(index, squared distance to that neighbour)``.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    idx = np.empty(len(query), dtype=np.int64)
    d2 = np.empty(len(query))
    for s in range(0, len(query), chunk):
        q = query[s : s + chunk]
        diff = q[:, None, :] - ref[None, :, :]
        dd = np.einsum("ijk,ijk->ij", diff, diff)
        score = dd if weights is None else dd * weights[None, :]
        j = score.argmin(axis=1)
        idx[s : s + chunk] = j
        d2[s : s + chunk] = dd[np.arange(len(q)), j]
    return idx, d2


def nearest(query: np.ndarray, ref: np.ndarray):
    """Nearest ref point for each query point: ``(index, squared distance)``."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(ref) == 0:
        raise GeometryError("nearest neighbour search in an empty set")
    if len(query) * len(ref) <= _BRUTE_FORCE_PAIRS:
        return nearest_brute(query, ref)
    dist, idx = cKDTree(ref).query(query, k=1)
    return idx.astype(np.int64), dist * dist


def nearest_weighted(query: np.ndarray, ref: np.ndarray, weights: np.ndarray):
    """argmin of ``w_j * |q - r_j|^2``; one KD-tree per distinct weight when there are few of them."""
    weights = np.asarray(weights, dtype=np.float64)
    levels = np.unique(weights)
    if len(query) * len(ref) <= _BRUTE_FORCE_PAIRS or len(levels) > 8:
        return nearest_brute(query, ref, weights=weights)
    best = np.full(len(query), np.inf)
    idx = np.zeros(len(query), dtype=np.int64)
    d2 = np.zeros(len(query))
    for w in levels:
        members = np.flatnonzero(weights == w)
        dist, j = cKDTree(ref[members]).query(query, k=1)
        score = w * dist * dist
        cand = members[j]
        take = (score < best) | ((score == best) & (cand < idx))
        best[take], idx[take], d2[take] = score[take], cand[take], (dist * dist)[take]
    return idx, d2


def knn(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points (including the point itself), shape (N, k)."""
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise GeometryError(f"k={k} exceeds the number of points {len(points)}")
    _, idx = cKDTree(points).query(points, k=k)
    return np.asarray(idx, dtype=np.int64).reshape(len(points), k)


def _sq_dist_to(a: Tensor, b: Tensor, idx: np.ndarray) -> Tensor:
    d = a - T.take_rows(b, idx)
    return (d * d).sum(axis=1)


def chamfer(a, b, reduction: str = "sum") -> Tensor:
    """Bidirectional squared nearest-neighbour distance; ``reduction`` is 'sum' or 'mean'."""
    return weighted_chamfer(a, b, None, reduction=reduction)


def weighted_chamfer(pred, gt, kappa: np.ndarray | None, reduction: str = "sum") -> Tensor:
    """Chamfer distance with per-ground-truth-point weights.

    pred -> gt: each predicted point takes the ground-truth point minimising
    ``kappa * d^2`` and pays that weighted distance.  gt -> pred: each
    ground-truth point pays ``kappa`` times its plain nearest distance.
    """
    a, b = as_points(pred), as_points(gt)
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("chamfer distance of an empty point set")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if kappa is not None:
        kappa = np.asarray(kappa, dtype=np.float64).reshape(-1)
        if kappa.shape[0] != len(b):
            raise GeometryError(f"{kappa.shape[0]} weights for {len(b)} ground-truth points")
        if np.all(kappa == 1.0):
            kappa = None
    if kappa is None:
        ia, _ = nearest(a.values, b.values)
        d_ab = _sq_dist_to(a, b, ia)
    else:
        ia, _ = nearest_weighted(a.values, b.values, kappa)
        d_ab = _sq_dist_to(a, b, ia) * kappa[ia]
    ib, _ = nearest(b.values, a.values)
    d_ba = _sq_dist_to(b, a, ib)
    if kappa is not None:
        d_ba = d_ba * kappa
    if reduction == "sum":
        return d_ab.sum() + d_ba.sum()
    return d_ab.mean() + d_ba.mean()


def averaging_matrix(neighbors, n: int | None = None) -> sp.csr_matrix:
    """Row-normalised adjacency; ``neighbors`` is a list of index lists or a sparse adjacency."""
    if sp.issparse(neighbors):
        adj = sp.csr_matrix(neighbors, dtype=np.float64)
        adj.data[:] = 1.0
    else:
        n = len(neighbors) if n is None else n
        rows = np.concatenate([np.full(len(nb), i) for i, nb in enumerate(neighbors)]) if n else np.zeros(0)
        cols = np.concatenate([np.asarray(nb, dtype=np.int64) for nb in neighbors]) if n else np.zeros(0)
        adj = sp.csr_matrix((np.ones(len(rows)), (rows.astype(np.int64), cols.astype(np.int64))), shape=(n, n))
        adj.sum_duplicates()
        adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    if np.any(deg == 0):
        bad = np.flatnonzero(deg == 0)
        raise GeometryError(f"{len(bad)} point(s) without neighbours, first index {bad[0]}")
    return sp.diags(1.0 / deg) @ adj


def laplacian_reg(points, neighbors) -> Tensor:
    """Sum over points of the squared distance to the centroid of their neighbours."""
    p = as_points(points)
    avg = averaging_matrix(neighbors, len(p))
    if avg.shape != (len(p), len(p)):
        raise GeometryError(f"adjacency of shape {avg.shape} for {len(p)} points")
    d = p - T.spmm(avg, p)
    return (d * d).sum()


def curvature_weights(gt: PointSet, k: int = 16, angle_thresh_deg: float = 60.0, high_w: float = 5.0) -> np.ndarray:
    """``high_w`` where the widest normal angle among the k nearest neighbours exceeds the threshold, else 1."""
    if gt.normals is None:
        raise GeometryError("curvature weights need normals")
    nbr = knn(gt.points, k)
    nrm = gt.normals[nbr]
    cos = np.einsum("nid,njd->nij", nrm, nrm)
    widest = np.degrees(np.arccos(np.clip(cos.min(axis=(1, 2)), -1.0, 1.0)))
    return np.where(widest > angle_thresh_deg, high_w, 1.0)
