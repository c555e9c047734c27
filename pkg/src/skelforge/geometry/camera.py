"""Pinhole projection and differentiable bilinear feature lookup."""

from __future__ import annotations

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import ShapeError, Tensor
from .types import Camera


def project_vertices(camera: Camera, verts) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(u, v)`` of world points and a mask of points in front and inside the image."""
    p = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    cam = p @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = camera.fx * cam[:, 0] / zs + camera.cx
    v = camera.fy * cam[:, 1] / zs + camera.cy
    inside = (u >= -0.5) & (u <= camera.width - 0.5) & (v >= -0.5) & (v <= camera.height - 0.5)
    return np.stack([u, v], axis=1), front & inside


def pixel_to_map(uv: np.ndarray, factor: int) -> np.ndarray:
    """Image pixel coordinates to texel coordinates of a map downsampled by ``factor``."""
    return (np.asarray(uv, dtype=np.float64) + 0.5) / factor - 0.5


def bilinear_sample(feature_map, coords) -> Tensor:
    """Sample an ``(H, W, C)`` map at ``(N, 2)`` texel coords ``(x=col, y=row)``; clamps at borders."""
    fm = T.as_tensor(feature_map)
    xy = T.as_tensor(coords)
    if fm.ndim != 3 or xy.ndim != 2 or xy.shape[1] != 2:
        raise ShapeError("bilinear_sample", fm.shape, xy.shape)
    h, w, _ = fm.shape
    x = T.clamp(xy[:, 0], 0.0, w - 1.0)
    y = T.clamp(xy[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x.values).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y.values).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0.astype(np.float64)).reshape(-1, 1)
    fy = (y - y0.astype(np.float64)).reshape(-1, 1)
    f00 = fm[y0, x0]
    f01 = fm[y0, x1]
    f10 = fm[y1, x0]
    f11 = fm[y1, x1]
    gx = 1.0 - fx
    gy = 1.0 - fy
    return gy * (gx * f00 + fx * f01) + fy * (gx * f10 + fx * f11)


def lift_features(encoding, camera: Camera, points) -> Tensor:
    """Concatenate bilinear samples of every feature map at each point's projection.

    Points projecting outside the image get zero features.
    """
    uv, mask = project_vertices(camera, points)
    parts = []
    for fm, factor in encoding.feature_maps:
        feats = bilinear_sample(fm, pixel_to_map(uv, factor))
        parts.append(feats)
    lifted = T.concat(parts, axis=1)
    if mask.all():
        return lifted
    return lifted * mask[:, None].astype(np.float64)
