"""Isosurface extraction from voxel grids."""

from __future__ import annotations

import numpy as np
from skimage import measure

from .types import ORIGIN, GeometryError, TriangleMesh, VoxelGrid


def marching_cubes(grid: VoxelGrid, iso: float = 0.5) -> TriangleMesh:
    """Triangle mesh of the ``iso`` level set, in world coordinates, outward-facing.

    Returns an empty mesh when the grid never crosses ``iso``.
    """
    if grid.resolution < 2:
        raise GeometryError("marching cubes needs a grid of resolution >= 2")
    v = grid.values
    if not (v.min() < iso < v.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    h = grid.voxel_size
    verts, faces, _, _ = measure.marching_cubes(v, level=iso, spacing=(h, h, h), allow_degenerate=False)
    verts = verts.astype(np.float64) + (ORIGIN + 0.5 * h)
    # skimage orients faces towards decreasing values; the solid is where values are high
    mesh = TriangleMesh(verts, faces[:, ::-1].astype(np.int64))
    if mesh.signed_volume() < 0:
        mesh = TriangleMesh(verts, faces.astype(np.int64))
    return mesh
