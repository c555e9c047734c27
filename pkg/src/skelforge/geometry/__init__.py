from .camera import bilinear_sample, lift_features, pixel_to_map, project_vertices
from .chamfer import chamfer, curvature_weights, knn, laplacian_reg, nearest, weighted_chamfer
from .io import read_obj, read_ply, read_volume, write_obj, write_ply, write_volume
from .marching import marching_cubes
from .mesh import (
    euler_characteristic,
    genus,
    largest_component,
    num_components,
    points_inside,
    sample_surface,
    voxelize_mesh,
)
from .morphology import dilate, fill_interior, iou
from .types import Camera, GeometryError, Label, PointSet, TriangleMesh, VoxelGrid

__all__ = [
    "Camera",
    "GeometryError",
    "Label",
    "PointSet",
    "TriangleMesh",
    "VoxelGrid",
    "bilinear_sample",
    "chamfer",
    "curvature_weights",
    "dilate",
    "euler_characteristic",
    "fill_interior",
    "genus",
    "iou",
    "knn",
    "laplacian_reg",
    "largest_component",
    "lift_features",
    "marching_cubes",
    "nearest",
    "num_components",
    "pixel_to_map",
    "points_inside",
    "project_vertices",
    "read_obj",
    "read_ply",
    "read_volume",
    "sample_surface",
    "voxelize_mesh",
    "weighted_chamfer",
    "write_obj",
    "write_ply",
    "write_volume",
]
