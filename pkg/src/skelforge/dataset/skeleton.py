"""Ground-truth skeleton preparation: sinking, curve/sheet labelling, volumes."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..geometry.chamfer import knn
from ..geometry.morphology import dilate, fill_interior
from ..geometry.types import GeometryError, Label, PointSet, VoxelGrid, world_to_index


def sink_to_skeleton(surface: PointSet, steps: int = 200, step_size: float = 0.005) -> PointSet:
    """Move surface samples inwards along their normals until they reach the medial region.

    After travelling depth ``t`` a point is compared with its nearest
    opposite-facing surface sample (normal dot product < 0).  It stops once
    that sample is no farther than ``t``, i.e. once it is about equidistant
    from both sides, with the crossing located by linear interpolation
    between the last two steps.
    """
    if surface.normals is None:
        raise GeometryError("sinking needs outward normals")
    pts = surface.points.copy()
    if steps <= 0 or len(pts) == 0:
        return PointSet(pts, None, surface.labels)
    nrm = surface.normals
    tree = cKDTree(surface.points)
    k = min(16, len(pts))

    def gap(x, own, depth):
        # (distance to nearest opposite-facing sample) - depth; inf when none nearby
        d, nn = tree.query(x, k=k)
        d, nn = d.reshape(len(x), k), nn.reshape(len(x), k)
        opp = np.einsum("ikd,id->ik", nrm[nn], nrm[own]) < 0.0
        return np.where(opp, d, np.inf).min(axis=1) - depth

    active = np.arange(len(pts))
    prev = np.full(len(pts), np.inf)
    for s in range(1, steps + 1):
        if not len(active):
            break
        cand = surface.points[active] - s * step_size * nrm[active]
        g = gap(cand, active, s * step_size)
        stop = g <= 0.0
        go = active[~stop]
        pts[go] = cand[~stop]
        prev[go] = g[~stop]
        done = active[stop]
        g0 = prev[done]
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(np.isfinite(g0), g0 / np.maximum(g0 - g[stop], 1e-300), 1.0)
        depth = (s - 1 + np.clip(frac, 0.0, 1.0)) * step_size
        pts[done] = surface.points[done] - depth[:, None] * nrm[done]
        active = go
    return PointSet(pts, None, surface.labels)


def pca_eigenvalues(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Descending covariance eigenvalues of each neighbourhood, shape (N, 3)."""
    nb = points[neighbors]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbors.shape[1]
    return np.linalg.eigvalsh(cov)[:, ::-1]


def classify_curve_sheet(skeleton: PointSet, k: int = 16, ratio_thresh: float = 0.2) -> np.ndarray:
    """Label each point Curve when one eigenvalue dominates its neighbourhood, else Sheet."""
    if k < 4:
        raise GeometryError(f"k must be at least 4, got {k}")
    if len(skeleton) < k:
        raise GeometryError(f"{len(skeleton)} points is fewer than k={k}")
    lam = pca_eigenvalues(skeleton.points, knn(skeleton.points, k))
    ratio = lam[:, 1] / np.maximum(lam[:, 0], 1e-300)
    return np.where(ratio < ratio_thresh, Label.CURVE, Label.SHEET).astype(np.int64)


def default_dilation_radius(resolution: int) -> int:
    """2 voxels at 256^3, scaled with resolution, never below 1."""
    return max(1, int(round(2 * resolution / 256)))


def quantize(points: np.ndarray, resolution: int) -> VoxelGrid:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    grid = np.zeros((resolution,) * 3)
    if len(pts):
        idx = world_to_index(pts, resolution)
        grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(grid)


def build_gt_volume(skeleton: PointSet, resolution: int, dilation_radius: int | None = None, connectivity: int = 6) -> VoxelGrid:
    """Quantize, fill enclosed cavities, then dilate."""
    if dilation_radius is None:
        dilation_radius = default_dilation_radius(resolution)
    return dilate(fill_interior(quantize(skeleton.points, resolution)), dilation_radius, connectivity)
