"""Uniform 8-bit quantization of feature packs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmsc.errors import ContractError

LEVELS = 256
BITS_PER_VALUE = 8


@dataclass
class BitStream:
    bits: np.ndarray  # uint8 0/1, MSB first per value
    rows: int
    channels: int
    vmin: float
    step: float
    bits_per_value: int = BITS_PER_VALUE

    def __post_init__(self):
        if self.bits.size != self.rows * self.channels * self.bits_per_value:
            msg = f"bit stream of {self.bits.size} bits does not frame {self.rows}x{self.channels} values"
            raise ContractError(msg)


def quantize_values(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Codes in [0, 255] plus (min, step); constant input gives step 0 and all-zero codes."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        msg = "quantize: non-finite feature values"
        raise ContractError(msg)
    vmin, vmax = float(x.min()), float(x.max())
    step = (vmax - vmin) / (LEVELS - 1)
    if step == 0.0:
        return np.zeros(x.shape, dtype=np.uint8), vmin, 0.0
    scaled = (x - vmin) / step
    codes = np.floor(scaled + 0.5)  # half away from zero; scaled is never negative
    return np.clip(codes, 0, LEVELS - 1).astype(np.uint8), vmin, step


def quantize(features: np.ndarray) -> BitStream:
    """Quantize a ``(K, C)`` pack into an MSB-first bit stream."""
    features = np.asarray(features)
    if features.ndim != 2:
        msg = f"quantize: expected (K, C) features, got {features.shape}"
        raise ContractError(msg)
    codes, vmin, step = quantize_values(features)
    bits = np.unpackbits(codes.reshape(-1, 1), axis=1).reshape(-1)
    return BitStream(bits, features.shape[0], features.shape[1], vmin, step)


def dequantize(stream: BitStream) -> np.ndarray:
    codes = np.packbits(stream.bits.reshape(-1, BITS_PER_VALUE).astype(np.uint8), axis=1)[:, 0]
    return (stream.vmin + codes.astype(np.float64) * stream.step).reshape(stream.rows, stream.channels)
