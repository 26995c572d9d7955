"""Numpy layer substrate: forward/backward primitives, modules and Adam."""

from exposnet.numerics.functional import (
    DTYPE,
    batch_norm,
    bilinear_resize,
    conv2d,
    dropout,
    fully_connected,
    global_avg_pool,
    max_pool2,
    relu,
    sigmoid,
)
from exposnet.numerics.layers import (
    BatchNorm2d,
    BilinearResize,
    Conv2d,
    Dropout,
    GlobalAvgPool,
    Linear,
    MaxPool2,
    Module,
    Parameter,
    ReLU,
    Sequential,
    Sigmoid,
    conv_block,
)
from exposnet.numerics.optim import AdamState, adam_step, grad_check, step_lr

__all__ = [
    "DTYPE", "batch_norm", "bilinear_resize", "conv2d", "dropout", "fully_connected",
    "global_avg_pool", "max_pool2", "relu", "sigmoid", "BatchNorm2d", "BilinearResize",
    "Conv2d", "Dropout", "GlobalAvgPool", "Linear", "MaxPool2", "Module", "Parameter",
    "ReLU", "Sequential", "Sigmoid", "conv_block", "AdamState", "adam_step", "grad_check",
    "step_lr",
]
