"""Minimal reverse-mode tensor engine used by the detection pipeline."""

from .tensor import Tensor, concatenate, grad_enabled, no_grad, stack
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    avg_pool2d,
    batchnorm,
    bilinear_sample,
    bilinear_sample_planes,
    channelwise_l2_normalize,
    conv2d,
    max_pool2d,
)
from .gradcheck import GradCheckReport, grad_check
from .store import CKPT_MAGIC, ParameterStore

__all__ = [
    "Tensor", "no_grad", "grad_enabled", "stack", "concatenate",
    "conv2d", "batchnorm", "channelwise_l2_normalize",
    "bilinear_sample", "bilinear_sample_planes", "avg_pool2d", "max_pool2d",
    "grad_check", "GradCheckReport", "ParameterStore", "CKPT_MAGIC",
    "BN_EPS", "BN_MOMENTUM",
]
