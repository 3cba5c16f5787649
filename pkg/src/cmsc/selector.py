"""Importance-aware spatial feature selection: top-K gating, gather and scatter.

The importance map is a 1x1 convolution to a single channel followed by a
sigmoid.  Selection keeps the ``K = ceil(lambda * H * W)`` most important
cells; ties go to the lowest linear (row-major) index.  Retained features are
multiplied by their importance score so the gate stays trainable through the
kept cells, and every other cell is zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from cmsc.errors import ContractError
from cmsc.nn import Conv2d, Module, Sigmoid
from cmsc.scene import FeatureMap


@dataclass
class ImportanceMap:
    values: np.ndarray  # (H, W), strictly inside (0, 1)


@dataclass
class SparseFeaturePack:
    features: np.ndarray  # (K, C)
    indices: np.ndarray  # (K,), strictly increasing linear positions
    shape: tuple[int, int]
    lam: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        k = self.indices.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != k:
            msg = f"pack features {self.features.shape} do not match {k} indices"
            raise ContractError(msg)
        if k and (np.any(np.diff(self.indices) <= 0) or self.indices[0] < 0
                  or self.indices[-1] >= self.shape[0] * self.shape[1]):
            msg = "pack indices must be strictly increasing positions inside the grid"
            raise ContractError(msg)

    @property
    def k(self) -> int:
        return int(self.indices.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not (0.0 < lam <= 1.0):
        msg = f"compression ratio must satisfy 0 < lambda <= 1, got {lam}"
        raise ContractError(msg)
    return lam


def num_selected(lam: float, h: int, w: int) -> int:
    """``ceil(lambda * H * W)``, robust to binary-float noise in the product."""
    return max(1, math.ceil(round(check_lambda(lam) * h * w, 9)))


def topk_indices(importance: np.ndarray, k: int) -> np.ndarray:
    """Linear indices of the ``k`` largest entries along the last axis, ascending.

    ``importance`` is ``(..., P)``; ties keep the lower index.
    """
    order = np.argsort(-importance, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


class Selector(Module):
    """Learned importance map: 1x1 conv (C -> 1) and a sigmoid."""

    kind = "selector"

    def __init__(self, channels: int, *, rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.conv = self.add("conv", Conv2d(channels, 1, 1, rng=rng))
        self.gate = self.add("gate", Sigmoid())

    def forward(self, x):
        self._cache = True
        return self.gate(self.conv(x))[..., 0]

    def backward(self, grad):
        self._need_cache()
        return self.conv.backward(self.gate.backward(grad[..., None]))


class Gather(Module):
    """Batched select + gather: ``(N, H, W, C)`` features and ``(N, H, W)`` importance
    to a ``(N, K, C)`` pack of importance-scaled rows."""

    kind = "gather"

    def forward(self, inputs):
        x, imp, k = inputs
        n, h, w, c = x.shape
        flat = x.reshape(n, h * w, c)
        iflat = imp.reshape(n, h * w)
        idx = topk_indices(iflat, k)
        rows = np.take_along_axis(flat, idx[..., None], axis=1)
        scores = np.take_along_axis(iflat, idx, axis=1)
        self._cache = (x.shape, idx, rows, scores)
        return rows * scores[..., None], idx

    def backward(self, grad):
        shape, idx, rows, scores = self._need_cache()
        n, h, w, c = shape
        gx = np.zeros((n, h * w, c))
        gi = np.zeros((n, h * w))
        np.put_along_axis(gx, idx[..., None], grad * scores[..., None], axis=1)
        np.put_along_axis(gi, idx, np.sum(grad * rows, axis=-1), axis=1)
        return gx.reshape(shape), gi.reshape(n, h, w)


def scatter_rows(rows: np.ndarray, idx: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of gather on the support: ``(N, K, C)`` rows into zeroed ``(N, H, W, C)``."""
    n, k, c = rows.shape
    h, w = shape
    if k and (idx.max() >= h * w or idx.min() < 0):
        msg = f"scatter: index {idx.max()} outside a {h}x{w} grid"
        raise ContractError(msg)
    out = np.zeros((n, h * w, c))
    np.put_along_axis(out, idx[..., None], rows, axis=1)
    return out.reshape(n, h, w, c)


def scatter_rows_backward(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, h, w, c = grad.shape
    return np.take_along_axis(grad.reshape(n, h * w, c), idx[..., None], axis=1)


def importance(fmap: FeatureMap, selector: Selector) -> ImportanceMap:
    if fmap.modality != "standard":
        msg = f"importance expects a standard-space map, got {fmap.modality!r}"
        raise ContractError(msg)
    return ImportanceMap(selector.forward(fmap.tensor[None])[0])


def select(fmap: FeatureMap, imp: ImportanceMap, lam: float) -> tuple[FeatureMap, SparseFeaturePack]:
    """Keep the top ``ceil(lambda * H * W)`` cells; returns the masked map and the pack."""
    h, w, c = fmap.shape
    k = num_selected(lam, h, w)
    idx = topk_indices(imp.values.reshape(-1), k)
    flat = fmap.tensor.reshape(h * w, c)
    rows = flat[idx] * imp.values.reshape(-1)[idx, None]
    masked = np.zeros_like(flat)
    masked[idx] = rows
    return (FeatureMap(masked.reshape(h, w, c), fmap.modality, fmap.vehicle_id),
            SparseFeaturePack(rows, idx, (h, w), float(lam)))


def scatter(pack: SparseFeaturePack, decoded: np.ndarray) -> FeatureMap:
    """Place ``decoded`` rows at the pack's positions; unselected cells are zero."""
    decoded = np.asarray(decoded, dtype=np.float64)
    if decoded.ndim != 2 or decoded.shape[0] != pack.k:
        msg = f"scatter: expected {pack.k} decoded rows, got shape {decoded.shape}"
        raise ContractError(msg)
    h, w = pack.shape
    out = scatter_rows(decoded[None], pack.indices[None], (h, w))[0]
    return FeatureMap(out, "standard")


_PACK_MAGIC = b"CMSCPACK"


def pack_to_bytes(pack: SparseFeaturePack) -> bytes:
    """Little-endian: magic, H, W, C, K (uint32), lambda (float64), K uint32 indices,
    then K*C float64 features in row-major order."""
    h, w = pack.shape
    header = _PACK_MAGIC + struct.pack("<4Id", h, w, pack.channels, pack.k, pack.lam)
    return (header + pack.indices.astype("<u4").tobytes()
            + np.ascontiguousarray(pack.features, dtype="<f8").tobytes())


def pack_from_bytes(data: bytes) -> SparseFeaturePack:
    if data[:8] != _PACK_MAGIC:
        msg = "not a serialized feature pack"
        raise ContractError(msg)
    h, w, c, k, lam = struct.unpack_from("<4Id", data, 8)
    off = 8 + struct.calcsize("<4Id")
    idx = np.frombuffer(data, "<u4", k, off).astype(np.int64)
    off += 4 * k
    feats = np.frombuffer(data, "<f8", k * c, off).reshape(k, c).astype(np.float64)
    return SparseFeaturePack(feats, idx, (h, w), lam)
