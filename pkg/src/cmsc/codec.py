"""Learned joint source-channel codec for packed features.

Encoder: two Conv-BN-ReLU blocks along the K axis (C -> 2C -> 2C), a linear
head emitting 2C reals per row, I/Q pairing of channels (even, odd) into C
complex symbols, and per-block power normalization to unit mean energy.

Decoder: an amplitude limiter on the equalized symbols, two Deconv-BN-ReLU
blocks (2C -> 2C -> 2C) and a linear head back to C reals per row.

Internally symbols travel as interleaved reals ``(N, K, 2C)`` so that the
same arrays flow through forward and backward passes.
"""

from __future__ import annotations

import numpy as np

from cmsc.channel import SymbolBlock
from cmsc.errors import ContractError
from cmsc.nn import BatchNorm, Conv2d, Deconv2d, Dense, Module, ReLU
from cmsc.selector import SparseFeaturePack


def to_complex(r: np.ndarray) -> np.ndarray:
    return r[..., 0::2] + 1j * r[..., 1::2]


def to_interleaved(c: np.ndarray) -> np.ndarray:
    out = np.empty(c.shape[:-1] + (2 * c.shape[-1],))
    out[..., 0::2] = c.real
    out[..., 1::2] = c.imag
    return out


class PowerNorm(Module):
    """Scale each ``(K, 2C)`` block so its mean complex-symbol energy is 1."""

    kind = "power-norm"

    def forward(self, r):
        n_sym = r.shape[-2] * r.shape[-1] / 2.0
        power = np.sum(r * r, axis=(-2, -1), keepdims=True) / n_sym
        if np.any(power <= 0.0):
            msg = "power_normalize: all-zero block has undefined scale"
            raise ContractError(msg)
        scale = power ** -0.5
        y = r * scale
        self._cache = (r, scale, n_sym)
        return y

    def backward(self, grad):
        r, scale, n_sym = self._need_cache()
        dot = np.sum(grad * r, axis=(-2, -1), keepdims=True)
        return scale * grad - r * dot * scale ** 3 / n_sym


class Limiter(Module):
    """Clip complex amplitudes to ``limit``; guards the decoder against the
    unbounded noise enhancement of zero-forcing in deep fades."""

    kind = "limiter"

    def __init__(self, limit: float):
        super().__init__()
        self.limit = limit

    def forward(self, r):
        i, q = r[..., 0::2], r[..., 1::2]
        amp = np.sqrt(i * i + q * q)
        factor = np.where(amp > self.limit, self.limit / np.maximum(amp, 1e-300), 1.0)
        out = np.empty_like(r)
        out[..., 0::2] = i * factor
        out[..., 1::2] = q * factor
        self._cache = (i, q, amp, factor)
        return out

    def backward(self, grad):
        i, q, amp, factor = self._need_cache()
        gi, gq = grad[..., 0::2], grad[..., 1::2]
        clipped = factor < 1.0
        safe = np.maximum(amp, 1e-300)
        ui, uq = i / safe, q / safe
        radial = ui * gi + uq * gq
        out = np.empty_like(grad)
        out[..., 0::2] = np.where(clipped, factor * (gi - ui * radial), gi)
        out[..., 1::2] = np.where(clipped, factor * (gq - uq * radial), gq)
        return out


class _Stack(Module):
    """Run children in order on a ``(N, 1, K, C)`` view of ``(N, K, C)`` rows."""

    order: list[str]

    def _run(self, x):
        for name in self.order:
            x = self.children[name](x)
        return x

    def _back(self, g):
        for name in reversed(self.order):
            g = self.children[name].backward(g)
        return g


class Encoder(_Stack):
    kind = "jscc-encoder"

    def __init__(self, channels: int, *, kernel: int = 3, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        c2 = 2 * channels
        self.channels = channels
        pad = (0, kernel // 2)
        self.add("conv1", Conv2d(channels, c2, (1, kernel), padding=pad, rng=rng))
        self.add("bn1", BatchNorm(c2))
        self.add("relu1", ReLU())
        self.add("conv2", Conv2d(c2, c2, (1, kernel), padding=pad, rng=rng))
        self.add("bn2", BatchNorm(c2))
        self.add("relu2", ReLU())
        self.add("head", Dense(c2, c2, rng=rng))
        self.add("power", PowerNorm())
        self.order = list(self.children)

    def forward(self, rows):
        if rows.ndim != 3 or rows.shape[-1] != self.channels:
            msg = f"encoder: expected (N, K, {self.channels}) rows, got {rows.shape}"
            raise ContractError(msg)
        if rows.shape[1] == 0:
            msg = "encoder: empty pack (K = 0)"
            raise ContractError(msg)
        self._cache = rows.shape
        out = self._run(rows[:, None])
        return out[:, 0]

    def backward(self, grad):
        self._need_cache()
        return self._back(grad[:, None])[:, 0]


class Decoder(_Stack):
    kind = "jscc-decoder"

    def __init__(self, channels: int, *, kernel: int = 3, symbol_clip: float = 3.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(1)
        c2 = 2 * channels
        self.channels = channels
        pad = (0, kernel // 2)
        self.add("limit", Limiter(symbol_clip))
        self.add("deconv1", Deconv2d(c2, c2, (1, kernel), padding=pad, rng=rng))
        self.add("bn1", BatchNorm(c2))
        self.add("relu1", ReLU())
        self.add("deconv2", Deconv2d(c2, c2, (1, kernel), padding=pad, rng=rng))
        self.add("bn2", BatchNorm(c2))
        self.add("relu2", ReLU())
        self.add("head", Dense(c2, channels, rng=rng))
        self.order = list(self.children)

    def forward(self, r):
        if r.ndim != 3 or r.shape[-1] != 2 * self.channels:
            msg = f"decoder: expected (N, K, {2 * self.channels}) interleaved symbols, got {r.shape}"
            raise ContractError(msg)
        self._cache = r.shape
        return self._run(r[:, None])[:, 0]

    def backward(self, grad):
        self._need_cache()
        return self._back(grad[:, None])[:, 0]


def power_normalize(symbols: np.ndarray) -> np.ndarray:
    """Scale complex ``symbols`` by ``1 / sqrt(mean |c|^2)``."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    power = np.mean(np.abs(symbols) ** 2)
    if power <= 0.0:
        msg = "power_normalize: all-zero input has undefined scale"
        raise ContractError(msg)
    return symbols / np.sqrt(power)


def encode(pack: SparseFeaturePack, encoder: Encoder) -> SymbolBlock:
    if pack.k == 0:
        msg = "encode: empty pack (K = 0)"
        raise ContractError(msg)
    r = encoder.forward(pack.features[None])
    return SymbolBlock(to_complex(r[0]))


def decode(received: SymbolBlock, pack_meta: SparseFeaturePack | tuple[int, int], decoder: Decoder) -> np.ndarray:
    k, c = (pack_meta.k, pack_meta.channels) if isinstance(pack_meta, SparseFeaturePack) else pack_meta
    if received.symbols.shape != (k, c):
        msg = f"decode: expected {k}x{c} symbols, got {received.symbols.shape}"
        raise ContractError(msg)
    return decoder.forward(to_interleaved(received.symbols)[None])[0]


def symbols_to_bytes(symbols: np.ndarray) -> bytes:
    """Interleaved little-endian float32 I/Q, row-major over ``(K, C)``."""
    return to_interleaved(np.asarray(symbols)).astype("<f4").tobytes()


def symbols_from_bytes(data: bytes, shape: tuple[int, int]) -> np.ndarray:
    r = np.frombuffer(data, "<f4").astype(np.float64)
    if r.size != 2 * shape[0] * shape[1]:
        msg = f"symbol stream holds {r.size // 2} symbols, expected {shape[0] * shape[1]}"
        raise ContractError(msg)
    return to_complex(r.reshape(shape[0], 2 * shape[1]))
