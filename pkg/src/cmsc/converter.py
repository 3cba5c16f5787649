"""Semantic converters between a sensor modality and the standard semantic space.

Each direction is a ConvNeXt block, an SE block and a residual 1x1 projection
(``z + W z``), all shape-preserving.  The standard space is anchored to the
LiDAR feature space.
"""

from __future__ import annotations

import numpy as np

from cmsc.config import MODALITIES, ModelConfig
from cmsc.errors import ContractError
from cmsc.nn import ConvNeXtBlock, Dense, Module, ResidualAdd, SEBlock
from cmsc.scene import FeatureMap


class ConverterNet(Module):
    kind = "converter"

    def __init__(self, channels: int, cfg: ModelConfig | None = None, *,
                 rng: np.random.Generator | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.block = self.add("convnext", ConvNeXtBlock(channels, kernel_size=cfg.convnext_kernel,
                                                        expansion=cfg.convnext_expansion, rng=rng))
        self.se = self.add("se", SEBlock(channels, cfg.se_reduction, rng=rng))
        self.proj = self.add("proj", Dense(channels, channels, rng=rng))
        self.skip = self.add("skip", ResidualAdd())
        # start the projection branch small so the net begins near (SE-scaled) identity
        self.proj.params["weight"] *= 0.1

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.channels:
            msg = f"converter: expected (N, H, W, {self.channels}) input, got {x.shape}"
            raise ContractError(msg)
        z = self.se(self.block(x))
        self._cache = True
        return self.skip((z, self.proj(z)))

    def backward(self, grad):
        self._need_cache()
        gz, gp = self.skip.backward(grad)
        return self.block.backward(self.se.backward(gz + self.proj.backward(gp)))


class ConverterPair(Module):
    """``to_std``: modality -> standard, ``from_std``: standard -> modality."""

    kind = "converter-pair"

    def __init__(self, modality: str, channels: int, cfg: ModelConfig | None = None, *,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if modality not in MODALITIES:
            msg = f"unknown modality {modality!r}"
            raise ContractError(msg)
        rng = rng or np.random.default_rng(0)
        self.modality = modality
        self.to_std = self.add("to_std", ConverterNet(channels, cfg, rng=rng))
        self.from_std = self.add("from_std", ConverterNet(channels, cfg, rng=rng))


def to_standard(fmap: FeatureMap, pair: ConverterPair) -> FeatureMap:
    if fmap.modality == "standard":
        msg = "to_standard: map is already in the standard space"
        raise ContractError(msg)
    if fmap.modality != pair.modality:
        msg = f"to_standard: {fmap.modality} map given to the {pair.modality} converter"
        raise ContractError(msg)
    out = pair.to_std.forward(fmap.tensor[None])[0]
    return FeatureMap(out, "standard", fmap.vehicle_id)


def from_standard(fmap: FeatureMap, target_modality: str, pairs: dict[str, ConverterPair]) -> FeatureMap:
    if target_modality not in MODALITIES:
        msg = f"from_standard: unknown target modality {target_modality!r}"
        raise ContractError(msg)
    if fmap.modality != "standard":
        msg = f"from_standard: expected a standard-space map, got {fmap.modality!r}"
        raise ContractError(msg)
    out = pairs[target_modality].from_std.forward(fmap.tensor[None])[0]
    return FeatureMap(out, target_modality, fmap.vehicle_id)


def cycle(fmap: FeatureMap, pairs: dict[str, ConverterPair]) -> FeatureMap:
    """``m -> s -> m`` round trip through the map's own converter pair."""
    if fmap.modality not in MODALITIES:
        msg = f"cycle: expected a sensor modality, got {fmap.modality!r}"
        raise ContractError(msg)
    return from_standard(to_standard(fmap, pairs[fmap.modality]), fmap.modality, pairs)

