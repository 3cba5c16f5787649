"""Dense-tensor layers with hand-written backward passes.

Feature maps are channels-last: ``(N, H, W, C)``.  Every layer caches what its
backward pass needs during ``forward``; calling ``backward`` without a cached
forward raises :class:`~cmsc.errors.UsageError`.  Parameter gradients
accumulate into ``layer.grads`` until :meth:`Module.zero_grad` is called.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.special import erf

from cmsc.errors import ContractError, UsageError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container for parameters, buffers and child modules."""

    kind = "module"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True
        self._cache = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.params:
            yield prefix + name, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)
        for child in self.children.values():
            child.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def clear_cache(self) -> None:
        self._cache = None
        for child in self.children.values():
            child.clear_cache()

    def _need_cache(self):
        if self._cache is None:
            msg = f"{self.kind}: backward called without a cached forward pass"
            raise UsageError(msg)
        return self._cache

    def _accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.copy()


def _check_map(layer: Module, x: np.ndarray, channels: int | None) -> None:
    if x.ndim != 4:
        msg = f"{layer.kind}: expected (N, H, W, C) input, got shape {x.shape}"
        raise ContractError(msg)
    if channels is not None and x.shape[-1] != channels:
        msg = f"{layer.kind}: expected {channels} input channels, got shape {x.shape}"
        raise ContractError(msg)


class Conv2d(Module):
    """2-D convolution, dense (``groups=1``) or depthwise (``groups=channels``).

    Weights have shape ``(kh, kw, in_channels // groups, out_channels)``.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, *, stride=1, padding=0,
                 groups=1, rng: np.random.Generator | None = None):
        super().__init__()
        if groups not in (1, in_channels) or (groups != 1 and out_channels != in_channels):
            msg = f"conv2d: groups must be 1 or equal to channels, got {groups}"
            raise ContractError(msg)
        self.in_channels, self.out_channels, self.groups = in_channels, out_channels, groups
        self.kernel_size = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel_size
        cin_g = in_channels // groups
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = he_uniform(rng, (kh, kw, cin_g, out_channels), kh * kw * cin_g)
        self.params["bias"] = np.zeros(out_channels)
        self.zero_grad()

    @property
    def depthwise(self) -> bool:
        return self.groups != 1

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def _windows(self, x_pad, ho, wo):
        (kh, kw), (sh, sw) = self.kernel_size, self.stride
        for i in range(kh):
            for j in range(kw):
                yield i, j, (slice(None), slice(i, i + sh * (ho - 1) + 1, sh),
                             slice(j, j + sw * (wo - 1) + 1, sw), slice(None))

    def forward(self, x):
        _check_map(self, x, self.in_channels)
        ph, pw = self.padding
        ho, wo = self.output_shape(x.shape[1], x.shape[2])
        if ho < 1 or wo < 1:
            msg = (f"conv2d: input {x.shape[1]}x{x.shape[2]} too small for kernel "
                   f"{self.kernel_size} with padding {self.padding}")
            raise ContractError(msg)
        x_pad = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        w = self.params["weight"]
        out = np.zeros((x.shape[0], ho, wo, self.out_channels), dtype=x.dtype)
        for i, j, sl in self._windows(x_pad, ho, wo):
            if self.depthwise:
                out += x_pad[sl] * w[i, j, 0]
            else:
                out += x_pad[sl] @ w[i, j]
        out += self.params["bias"]
        self._cache = (x, x_pad)
        return out

    def backward(self, grad):
        x, x_pad = self._need_cache()
        ph, pw = self.padding
        ho, wo = grad.shape[1], grad.shape[2]
        w = self.params["weight"]
        gw = np.zeros_like(w)
        gx_pad = np.zeros_like(x_pad)
        g2 = grad.reshape(-1, self.out_channels)
        for i, j, sl in self._windows(x_pad, ho, wo):
            xs = x_pad[sl]
            if self.depthwise:
                gw[i, j, 0] = np.einsum("nhwc,nhwc->c", xs, grad)
                gx_pad[sl] += grad * w[i, j, 0]
            else:
                gw[i, j] = xs.reshape(-1, self.in_channels).T @ g2
                gx_pad[sl] += grad @ w[i, j].T
        self._accumulate("weight", gw)
        self._accumulate("bias", g2.sum(axis=0))
        h, wd = x.shape[1], x.shape[2]
        return gx_pad[:, ph:ph + h, pw:pw + wd, :]


class Deconv2d(Module):
    """Transposed 2-D convolution; weights ``(kh, kw, in_channels, out_channels)``."""

    kind = "deconv2d"

    def __init__(self, in_channels, out_channels, kernel_size, *, stride=1, padding=0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel_size
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = he_uniform(rng, (kh, kw, in_channels, out_channels), kh * kw * in_channels)
        self.params["bias"] = np.zeros(out_channels)
        self.zero_grad()

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        return (h - 1) * sh + kh - 2 * ph, (w - 1) * sw + kw - 2 * pw

    def _slices(self, h, w):
        (kh, kw), (sh, sw) = self.kernel_size, self.stride
        for i in range(kh):
            for j in range(kw):
                yield i, j, (slice(None), slice(i, i + sh * (h - 1) + 1, sh),
                             slice(j, j + sw * (w - 1) + 1, sw), slice(None))

    def forward(self, x):
        _check_map(self, x, self.in_channels)
        n, h, w = x.shape[:3]
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        ho, wo = self.output_shape(h, w)
        if ho < 1 or wo < 1:
            msg = f"deconv2d: padding {self.padding} crops away the whole {h}x{w} output"
            raise ContractError(msg)
        full = np.zeros((n, (h - 1) * sh + kh, (w - 1) * sw + kw, self.out_channels), dtype=x.dtype)
        wt = self.params["weight"]
        for i, j, sl in self._slices(h, w):
            full[sl] += x @ wt[i, j]
        self._cache = x
        return full[:, ph:ph + ho, pw:pw + wo, :] + self.params["bias"]

    def backward(self, grad):
        x = self._need_cache()
        n, h, w = x.shape[:3]
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        gfull = np.zeros((n, (h - 1) * sh + kh, (w - 1) * sw + kw, self.out_channels), dtype=grad.dtype)
        gfull[:, ph:ph + grad.shape[1], pw:pw + grad.shape[2], :] = grad
        wt = self.params["weight"]
        gw = np.zeros_like(wt)
        gx = np.zeros_like(x)
        x2 = x.reshape(-1, self.in_channels)
        for i, j, sl in self._slices(h, w):
            gs = gfull[sl]
            gw[i, j] = x2.T @ gs.reshape(-1, self.out_channels)
            gx += gs @ wt[i, j].T
        self._accumulate("weight", gw)
        self._accumulate("bias", grad.reshape(-1, self.out_channels).sum(axis=0))
        return gx


class Dense(Module):
    """Affine map on the last axis: ``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    kind = "dense"

    def __init__(self, in_features, out_features, *, bias=True, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = he_uniform(rng, (out_features, in_features), in_features)
        if bias:
            self.params["bias"] = np.zeros(out_features)
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            msg = f"dense: expected last dim {self.in_features}, got shape {x.shape}"
            raise ContractError(msg)
        self._cache = x
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, grad):
        x = self._need_cache()
        g2 = grad.reshape(-1, self.out_features)
        self._accumulate("weight", g2.T @ x.reshape(-1, self.in_features))
        if "bias" in self.params:
            self._accumulate("bias", g2.sum(axis=0))
        return grad @ self.params["weight"]


class BatchNorm(Module):
    """Per-channel normalization over every axis but the last.

    Training mode normalizes with batch statistics and updates running
    statistics with momentum 0.1; evaluation mode uses the running statistics.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.channels:
            msg = f"batchnorm: expected {self.channels} channels, got shape {x.shape}"
            raise ContractError(msg)
        axes = tuple(range(x.ndim - 1))
        if self.training:
            m = x.size // self.channels
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - self.momentum
            rm += self.momentum * mean
            rv *= 1.0 - self.momentum
            rv += self.momentum * var * (m / max(m - 1, 1))
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, self.training)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv_std, training = self._need_cache()
        axes = tuple(range(grad.ndim - 1))
        self._accumulate("gamma", (grad * xhat).sum(axis=axes))
        self._accumulate("beta", grad.sum(axis=axes))
        dxhat = grad * self.params["gamma"]
        if not training:
            return dxhat * inv_std
        m = grad.size // self.channels
        return (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))


class LayerNorm(Module):
    """Normalization over the channel (last) axis at each position."""

    kind = "layernorm"

    def __init__(self, channels: int, *, eps: float = 1e-6):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.channels:
            msg = f"layernorm: expected {self.channels} channels, got shape {x.shape}"
            raise ContractError(msg)
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv_std = self._need_cache()
        axes = tuple(range(grad.ndim - 1))
        self._accumulate("gamma", (grad * xhat).sum(axis=axes))
        self._accumulate("beta", grad.sum(axis=axes))
        dxhat = grad * self.params["gamma"]
        c = self.channels
        return (inv_std / c) * (c * dxhat - dxhat.sum(axis=-1, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return grad * self._need_cache()


class GELU(Module):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF evaluated through erf."""

    kind = "gelu"

    def forward(self, x):
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        self._cache = (x, cdf)
        return x * cdf

    def backward(self, grad):
        x, cdf = self._need_cache()
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return grad * (cdf + x * pdf)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Module):
    kind = "sigmoid"

    def forward(self, x):
        y = sigmoid(np.asarray(x, dtype=np.float64))
        self._cache = y
        return y

    def backward(self, grad):
        y = self._need_cache()
        return grad * y * (1.0 - y)


class GlobalAvgPool(Module):
    """``(N, H, W, C) -> (N, C)`` spatial mean."""

    kind = "global-avg-pool"

    def forward(self, x):
        _check_map(self, x, None)
        self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        n, h, w, c = self._need_cache()
        return np.broadcast_to(grad[:, None, None, :] / (h * w), (n, h, w, c)).copy()


class ResidualAdd(Module):
    """Two-input sum; ``forward((a, b))`` returns ``a + b``."""

    kind = "residual-add"

    def forward(self, inputs):
        a, b = inputs
        if a.shape != b.shape:
            msg = f"residual-add: operand shapes differ, {a.shape} vs {b.shape}"
            raise ContractError(msg)
        self._cache = True
        return a + b

    def backward(self, grad):
        self._need_cache()
        return grad, grad


class ChannelScale(Module):
    """Scale each channel of ``(N, H, W, C)`` by a per-sample ``(N, C)`` factor."""

    kind = "channel-scale"

    def forward(self, inputs):
        x, s = inputs
        _check_map(self, x, None)
        if s.shape != (x.shape[0], x.shape[-1]):
            msg = f"channel-scale: scale shape {s.shape} does not match map {x.shape}"
            raise ContractError(msg)
        self._cache = (x, s)
        return x * s[:, None, None, :]

    def backward(self, grad):
        x, s = self._need_cache()
        return grad * s[:, None, None, :], (grad * x).sum(axis=(1, 2))


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv2d, Deconv2d, Dense, BatchNorm, ReLU, GELU, Sigmoid, GlobalAvgPool,
                LayerNorm, ResidualAdd, ChannelScale)
}


def forward(layer: Module, x):
    """Run ``layer`` on ``x``; the activation cache is kept for :func:`backward`."""
    return layer.forward(x)


def backward(layer: Module, x, grad_output):
    """Gradients w.r.t. the input and each parameter of ``layer``.

    ``x`` must be the input of the most recent forward call.  Parameter
    gradients returned here are for this call alone (not accumulated).
    """
    cache = layer._cache
    if cache is None:
        msg = f"{layer.kind}: no cached forward activations; call forward first"
        raise UsageError(msg)
    layer.zero_grad()
    grad_input = layer.backward(grad_output)
    return grad_input, {k: v.copy() for k, v in layer.grads.items()}
