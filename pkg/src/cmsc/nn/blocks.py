"""Composite blocks built from :mod:`cmsc.nn.layers`."""

from __future__ import annotations

import numpy as np

from cmsc.errors import ContractError
from cmsc.nn.layers import (
    GELU,
    ChannelScale,
    Conv2d,
    Dense,
    GlobalAvgPool,
    LayerNorm,
    Module,
    ReLU,
    ResidualAdd,
    Sigmoid,
)


class SEBlock(Module):
    """Squeeze-and-excitation channel attention.

    ``out = x * sigmoid(W2 relu(W1 avgpool(x) + b1) + b2)`` per channel, with
    a bottleneck of ``channels // reduction`` units.
    """

    kind = "se-block"

    def __init__(self, channels: int, reduction: int = 4, *, rng: np.random.Generator | None = None):
        super().__init__()
        if channels % reduction:
            msg = f"se-block: channels {channels} not divisible by reduction {reduction}"
            raise ContractError(msg)
        rng = rng or np.random.default_rng(0)
        self.channels, self.reduction = channels, reduction
        hidden = channels // reduction
        self.pool = self.add("pool", GlobalAvgPool())
        self.fc1 = self.add("fc1", Dense(channels, hidden, rng=rng))
        self.act = self.add("act", ReLU())
        self.fc2 = self.add("fc2", Dense(hidden, channels, rng=rng))
        self.gate = self.add("gate", Sigmoid())
        self.scale = self.add("scale", ChannelScale())

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.channels:
            msg = f"se-block: expected (N, H, W, {self.channels}) input, got {x.shape}"
            raise ContractError(msg)
        s = self.gate(self.fc2(self.act(self.fc1(self.pool(x)))))
        self._cache = True
        return self.scale((x, s))

    def backward(self, grad):
        self._need_cache()
        gx, gs = self.scale.backward(grad)
        gs = self.fc1.backward(self.act.backward(self.fc2.backward(self.gate.backward(gs))))
        return gx + self.pool.backward(gs)


class ConvNeXtBlock(Module):
    """Residual block: depthwise k x k conv, layernorm, 4x pointwise expand, GELU, project."""

    kind = "convnext-block"

    def __init__(self, channels: int, *, kernel_size: int = 7, expansion: int = 4,
                 padding: int | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels, self.kernel_size = channels, kernel_size
        self.padding = kernel_size // 2 if padding is None else padding
        self.dwconv = self.add("dwconv", Conv2d(channels, channels, kernel_size,
                                                padding=self.padding, groups=channels, rng=rng))
        self.norm = self.add("norm", LayerNorm(channels))
        self.expand = self.add("expand", Dense(channels, expansion * channels, rng=rng))
        self.act = self.add("act", GELU())
        self.project = self.add("project", Dense(expansion * channels, channels, rng=rng))
        self.residual = self.add("residual", ResidualAdd())

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.channels:
            msg = f"convnext-block: expected (N, H, W, {self.channels}) input, got {x.shape}"
            raise ContractError(msg)
        if self.padding * 2 < self.kernel_size - 1:
            h, w = x.shape[1:3]
            need = self.kernel_size - 2 * self.padding
            if h < need or w < need:
                msg = (f"convnext-block: {h}x{w} map is smaller than the {self.kernel_size}x"
                       f"{self.kernel_size} kernel with padding {self.padding}")
                raise ContractError(msg)
        y = self.project(self.act(self.expand(self.norm(self.dwconv(x)))))
        out = self.residual((y, x))
        self._cache = True
        return out

    def backward(self, grad):
        self._need_cache()
        gy, gskip = self.residual.backward(grad)
        g = self.dwconv.backward(self.norm.backward(self.expand.backward(
            self.act.backward(self.project.backward(gy)))))
        return g + gskip


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers: Module, names: list[str] | None = None):
        super().__init__()
        names = names or [str(i) for i in range(len(layers))]
        self.layers = [self.add(n, layer) for n, layer in zip(names, layers)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        self._cache = True
        return x

    def backward(self, grad):
        self._need_cache()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def se_block(x: np.ndarray, block: SEBlock) -> np.ndarray:
    return block.forward(x)


def convnext_block(x: np.ndarray, block: ConvNeXtBlock) -> np.ndarray:
    return block.forward(x)
