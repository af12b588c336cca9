"""Minimal neural-layer engine with hand-written exact backward passes."""

from .layers import (
    ChannelLayerNorm,
    Conv2d,
    ConvBlock,
    DepthwiseConv3x3,
    DownsampleLearned,
    LocalFeedForward,
    Module,
    MultiHeadChannelAttention,
    Param,
    Sequential,
    TransformerLayer,
    UpsampleLearned,
    gelu,
    gelu_grad,
)
from .gradcheck import GradcheckResult, gradcheck_layer, gradcheck_params

__all__ = [
    "ChannelLayerNorm",
    "Conv2d",
    "ConvBlock",
    "DepthwiseConv3x3",
    "DownsampleLearned",
    "GradcheckResult",
    "LocalFeedForward",
    "Module",
    "MultiHeadChannelAttention",
    "Param",
    "Sequential",
    "TransformerLayer",
    "UpsampleLearned",
    "gelu",
    "gelu_grad",
    "gradcheck_layer",
    "gradcheck_params",
]
