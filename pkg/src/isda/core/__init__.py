from .autograd import backward, check_gradients, numeric_grad, relative_error
from .ops import (
    NonFiniteError,
    bilinear_sample,
    bilinear_upsample2x,
    check_finite,
    conv2d,
    group_norm,
    layer_norm,
    norm_groups,
    resize,
)
from .optim import AdamWState, adamw_step

__all__ = [
    "AdamWState",
    "NonFiniteError",
    "adamw_step",
    "backward",
    "bilinear_sample",
    "bilinear_upsample2x",
    "check_finite",
    "check_gradients",
    "conv2d",
    "group_norm",
    "layer_norm",
    "norm_groups",
    "numeric_grad",
    "relative_error",
    "resize",
]
