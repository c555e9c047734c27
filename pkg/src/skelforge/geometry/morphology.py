"""Binary voxel morphology and overlap metrics."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .types import GeometryError, VoxelGrid


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise GeometryError(f"connectivity must be 6 or 26, got {connectivity}")


def dilate(grid: VoxelGrid, radius: int, connectivity: int = 6) -> VoxelGrid:
    """Binary dilation by the 6- or 26-neighbourhood element, applied ``radius`` times."""
    if radius < 0:
        raise GeometryError(f"dilation radius must be >= 0, got {radius}")
    occ = grid.binary()
    if radius == 0:
        return VoxelGrid(occ.astype(np.float64))
    out = ndimage.binary_dilation(occ, structure=_structure(connectivity), iterations=radius)
    return VoxelGrid(out.astype(np.float64))


def fill_interior(grid: VoxelGrid) -> VoxelGrid:
    """Occupy every empty voxel not 6-connected to the grid boundary."""
    occ = grid.binary()
    labels, _ = ndimage.label(~occ, structure=_structure(6))
    border = np.unique(
        np.concatenate(
            [labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(), labels[:, -1].ravel(), labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]
        )
    )
    exterior = np.isin(labels, border[border > 0])
    return VoxelGrid((~exterior).astype(np.float64))


def iou(a: VoxelGrid, b: VoxelGrid, thresh: float = 0.5) -> float:
    if a.resolution != b.resolution:
        raise GeometryError(f"IoU of grids with resolutions {a.resolution} and {b.resolution}")
    x, y = a.values >= thresh, b.values >= thresh
    union = np.count_nonzero(x | y)
    if union == 0:
        return 1.0
    return np.count_nonzero(x & y) / union
