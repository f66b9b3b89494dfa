"""Minimal numpy tensor library with reverse-mode autodiff."""
from .gradcheck import GradcheckReport, gradcheck
from .layers import BatchNorm2d, Conv2d, Ctx, Linear, Module
from .ops import (
    batchnorm2d,
    bce_l2_loss,
    bce_logits_l2_loss,
    concat,
    conv2d,
    dropout,
    flatten,
    global_avg_pool,
    linear,
    maxpool2d,
    relu,
    sigmoid,
)
from .optim import AdamState, adam_step
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "Ctx",
    "GradcheckReport",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "adam_step",
    "backward",
    "batchnorm2d",
    "bce_l2_loss",
    "bce_logits_l2_loss",
    "concat",
    "conv2d",
    "dropout",
    "flatten",
    "global_avg_pool",
    "gradcheck",
    "linear",
    "maxpool2d",
    "no_grad",
    "relu",
    "sigmoid",
]
