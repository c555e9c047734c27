from .checkpoint import load_store, save_store
from .conv import conv3d, conv_transpose3d, max_pool3d, upsample_nearest3d
from .nn import (
    MLP,
    Conv3d,
    ConvTranspose3d,
    Dense,
    EncoderOutput,
    ImageEncoder,
    MissingGradError,
    ParamStore,
    encode_views,
    max_pool_aggregate,
    optimizer_step,
    toy_image_encoder,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "MLP",
    "Conv3d",
    "ConvTranspose3d",
    "Dense",
    "EncoderOutput",
    "ImageEncoder",
    "MissingGradError",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "conv3d",
    "conv_transpose3d",
    "encode_views",
    "load_store",
    "max_pool3d",
    "max_pool_aggregate",
    "optimizer_step",
    "save_store",
    "toy_image_encoder",
    "upsample_nearest3d",
]
