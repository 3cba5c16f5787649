"""AWGN / Rayleigh flat-fading channel with zero-forcing equalization.

SNR is defined per complex symbol under unit average signal power, so the
noise variance is ``sigma2 = 10 ** (-snr_db / 10)``, split equally between I
and Q.  ``snr_db = inf`` is the noiseless sentinel.  Rayleigh gains are i.i.d.
``CN(0, 1)`` per symbol (fast fading) unless ``block_fading`` is set, in which
case one gain is shared by every symbol of a block.  The receiver is assumed
to know the gains exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmsc.errors import ContractError

CHANNEL_MODELS = ("awgn", "rayleigh")
POWER_TOLERANCE = 1e-6
DEEP_FADE = 1e-12


@dataclass
class SymbolBlock:
    symbols: np.ndarray  # complex, (..., K, C)
    erasures: int = 0

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.symbols) ** 2))

    @property
    def shape(self):
        return self.symbols.shape


@dataclass
class ChannelRealization:
    gains: np.ndarray
    sigma2: float
    snr_db: float
    model: str


def snr_to_sigma2(snr_db: float) -> float:
    if np.isposinf(snr_db):
        return 0.0
    return float(10.0 ** (-float(snr_db) / 10.0))


def seed_stream(base_seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent seed for ``(base_seed, trial, cav_id, ...)``."""
    return np.random.SeedSequence([int(base_seed) & (2**64 - 1), *(int(k) & (2**64 - 1) for k in keys)])


def _block_power(symbols: np.ndarray) -> np.ndarray:
    return np.mean(np.abs(symbols) ** 2, axis=(-2, -1))


def apply_channel(symbols: np.ndarray, model: str, snr_db: float, rng: np.random.Generator,
                  *, block_fading: bool = False) -> tuple[np.ndarray, np.ndarray, float]:
    """``Y = H * C + n`` on a ``(..., K, C)`` complex array; returns ``(Y, H, sigma2)``."""
    if model not in CHANNEL_MODELS:
        msg = f"unknown channel model {model!r}; expected one of {CHANNEL_MODELS}"
        raise ContractError(msg)
    sigma2 = snr_to_sigma2(snr_db)
    shape = symbols.shape
    if model == "awgn":
        gains = np.ones(shape, dtype=np.complex128)
    else:
        gshape = shape[:-2] + (1, 1) if block_fading else shape
        gains = (rng.standard_normal(gshape) + 1j * rng.standard_normal(gshape)) / np.sqrt(2.0)
        gains = np.broadcast_to(gains, shape).copy()
    received = gains * symbols
    if sigma2 > 0:
        received = received + np.sqrt(sigma2 / 2.0) * (
            rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return received, gains, sigma2


def transmit(block: SymbolBlock, model: str, snr_db: float, seed, *,
             block_fading: bool = False) -> tuple[SymbolBlock, ChannelRealization]:
    """Send a power-normalized block through the channel, deterministically in ``seed``."""
    power = _block_power(block.symbols)
    if np.any(np.abs(power - 1.0) > POWER_TOLERANCE):
        msg = f"transmit: block is not power-normalized (mean |c|^2 = {np.ravel(power)[:4]})"
        raise ContractError(msg)
    rng = np.random.default_rng(seed)
    y, gains, sigma2 = apply_channel(block.symbols, model, snr_db, rng, block_fading=block_fading)
    return SymbolBlock(y), ChannelRealization(gains, sigma2, float(snr_db), model)


def zero_force(received: np.ndarray, gains: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise ``Y / H``; elements in a deep fade are zeroed and flagged."""
    erased = np.abs(gains) < DEEP_FADE
    safe = np.where(erased, 1.0, gains)
    return np.where(erased, 0.0, received / safe), erased


def equalize(received: SymbolBlock, real: ChannelRealization) -> SymbolBlock:
    if real.gains.shape != received.symbols.shape:
        msg = f"equalize: gains {real.gains.shape} vs symbols {received.symbols.shape}"
        raise ContractError(msg)
    if real.model == "awgn":
        return SymbolBlock(received.symbols.copy())
    symbols, erased = zero_force(received.symbols, real.gains)
    return SymbolBlock(symbols, int(erased.sum()))
