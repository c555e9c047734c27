"""Differentiable point-to-voxel layer.

``U(i) = exp(-M * min_p |c(i) - p|^2)`` for voxels within the truncation
radius ``rho`` of some point, 0 elsewhere.  ``rho`` is chosen so that the
nulled voxels would have read at most ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import tensor as T
from .autodiff.conv import max_pool3d
from .autodiff.tensor import ShapeError, Tensor, _node
from .geometry.types import GeometryError, VoxelGrid, grid_centers


@dataclass(frozen=True)
class P2VConfig:
    resolution: int = 32
    M: float = 10.0
    tol: float = 1e-6

    def __post_init__(self):
        if self.M <= 0 or not 0 < self.tol < 1 or self.resolution < 1:
            raise ValueError(f"invalid Point2Voxel config {self}")

    @property
    def rho(self) -> float:
        return float(np.sqrt(np.log(1.0 / self.tol) / self.M))


@dataclass
class P2VCache:
    active: np.ndarray  # flat voxel indices
    nearest: np.ndarray  # point index per active voxel
    values: np.ndarray  # U at the active voxels
    centers: np.ndarray  # (n_active, 3)
    points: np.ndarray
    M: float
    resolution: int


_CENTERS: dict[int, np.ndarray] = {}


def _centers(r: int) -> np.ndarray:
    if r not in _CENTERS:
        _CENTERS[r] = grid_centers(r).reshape(-1, 3)
    return _CENTERS[r]


def point2voxel_forward(points: np.ndarray, cfg: P2VConfig) -> tuple[np.ndarray, P2VCache]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("Point2Voxel of an empty point set")
    r = cfg.resolution
    centers = _centers(r)
    dist, idx = cKDTree(pts).query(centers, k=1, distance_upper_bound=cfg.rho)
    active = np.flatnonzero(np.isfinite(dist))
    nearest = idx[active].astype(np.int64)
    c = centers[active]
    d2 = ((c - pts[nearest]) ** 2).sum(axis=1)
    vals = np.exp(-cfg.M * d2)
    out = np.zeros(r**3)
    out[active] = vals
    return out.reshape(r, r, r), P2VCache(active, nearest, vals, c, pts, cfg.M, r)


def point2voxel_grad(upstream: np.ndarray, cache: P2VCache | None) -> np.ndarray:
    """Per-point gradient: sum over active voxels of ``g * U * 2M * (c - p)``."""
    if cache is None:
        raise GeometryError("Point2Voxel backward needs the forward cache")
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)[cache.active]
    coef = g * cache.values * 2.0 * cache.M
    diff = cache.centers - cache.points[cache.nearest]
    n = len(cache.points)
    return np.stack([np.bincount(cache.nearest, weights=coef * diff[:, k], minlength=n) for k in range(3)], axis=1)


def point2voxel(points, cfg: P2VConfig | None = None) -> Tensor:
    """Soft occupancy ``(r, r, r)`` differentiable with respect to ``points``."""
    cfg = cfg or P2VConfig()
    pts = T.as_tensor(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError("point2voxel", pts.shape)
    values, cache = point2voxel_forward(pts.values, cfg)
    out = _node(values, (pts,), lambda g: (point2voxel_grad(g, cache),), "point2voxel")
    out.cache = cache
    return out


def point2voxel_grid(points, cfg: P2VConfig | None = None) -> VoxelGrid:
    values, _ = point2voxel_forward(np.asarray(points.points if hasattr(points, "points") else points), cfg or P2VConfig())
    return VoxelGrid(values)


def downsample(grid, factor: int = 2):
    """``factor``^3 max-pooling of a VoxelGrid or an ``(r, r, r)`` Tensor."""
    if isinstance(grid, VoxelGrid):
        return VoxelGrid(downsample(Tensor(grid.values), factor).values)
    t = T.as_tensor(grid)
    r = t.shape[0]
    if t.ndim != 3 or r % factor:
        raise ShapeError("downsample", t.shape, detail=f"resolution must be divisible by {factor}")
    return max_pool3d(t.reshape(1, r, r, r, 1), factor).reshape(r // factor, r // factor, r // factor)
