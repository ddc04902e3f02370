"""Minimal tensor engine: the ops the segmentation model and its losses need."""

from .core import (
    NORM_EPS,
    PROB_EPS,
    Tape,
    Tensor,
    add,
    avg_pool2d,
    backward,
    bce_mean,
    conv2d,
    cosine_map,
    masked_mean,
    mul,
    no_grad,
    relu,
    scale,
    sigmoid,
    stack_mean,
    sub,
    take,
    tmean,
    tsum,
    zero_grads,
)
from .optim import finite_diff_grad, sgd_step
from .serialize import dumps, load_tensor, loads, save_tensor

__all__ = [
    "NORM_EPS",
    "PROB_EPS",
    "Tape",
    "Tensor",
    "add",
    "avg_pool2d",
    "backward",
    "bce_mean",
    "conv2d",
    "cosine_map",
    "dumps",
    "finite_diff_grad",
    "load_tensor",
    "loads",
    "masked_mean",
    "mul",
    "no_grad",
    "relu",
    "save_tensor",
    "scale",
    "sgd_step",
    "sigmoid",
    "stack_mean",
    "sub",
    "take",
    "tmean",
    "tsum",
    "zero_grads",
]
