from cmsc.nn.blocks import ConvNeXtBlock, SEBlock, Sequential, convnext_block, se_block
from cmsc.nn.gradcheck import check_module, numerical_gradient, relative_error
from cmsc.nn.layers import (
    GELU,
    LAYER_KINDS,
    BatchNorm,
    ChannelScale,
    Conv2d,
    Deconv2d,
    Dense,
    GlobalAvgPool,
    LayerNorm,
    Module,
    ReLU,
    ResidualAdd,
    Sigmoid,
    backward,
    forward,
    sigmoid,
)
from cmsc.nn.optim import AdamState, ParamStore, adam_step

__all__ = [
    "GELU", "LAYER_KINDS", "AdamState", "BatchNorm", "ChannelScale", "Conv2d", "ConvNeXtBlock",
    "Deconv2d", "Dense", "GlobalAvgPool", "LayerNorm", "Module", "ParamStore", "ReLU",
    "ResidualAdd", "SEBlock", "Sequential", "Sigmoid", "adam_step", "backward", "check_module",
    "convnext_block", "forward", "numerical_gradient", "relative_error", "se_block", "sigmoid",
]
