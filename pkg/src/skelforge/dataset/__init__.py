from .shapes import KINDS, PARAM_RANGES, ShapeSample, generate_shape, random_params, render, validate_params
from .skeleton import build_gt_volume, classify_curve_sheet, default_dilation_radius, pca_eigenvalues, quantize, sink_to_skeleton
from .store import MissingArtifactError, generate_dataset, load_sample, read_split, save_sample, write_split

__all__ = [
    "KINDS",
    "PARAM_RANGES",
    "MissingArtifactError",
    "ShapeSample",
    "build_gt_volume",
    "classify_curve_sheet",
    "default_dilation_radius",
    "generate_dataset",
    "generate_shape",
    "load_sample",
    "pca_eigenvalues",
    "quantize",
    "random_params",
    "read_split",
    "render",
    "save_sample",
    "sink_to_skeleton",
    "validate_params",
    "write_split",
]
