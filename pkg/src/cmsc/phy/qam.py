"""Gray-coded square QAM with max-log LLR demodulation.

Bits split in halves per symbol: the first half picks the in-phase level, the
second half the quadrature level, each through a binary-reflected Gray code.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from cmsc.errors import ContractError

SUPPORTED_ORDERS = (16, 256)


def _check_order(order: int) -> int:
    if order not in SUPPORTED_ORDERS:
        msg = f"unsupported QAM order {order}; expected one of {SUPPORTED_ORDERS}"
        raise ContractError(msg)
    return int(np.log2(order))


@lru_cache(maxsize=None)
def constellation(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-energy points ``(M,)`` and their bit labels ``(M, log2 M)``, MSB first."""
    bps = _check_order(order)
    half = bps // 2
    side = 1 << half
    labels = ((np.arange(order)[:, None] >> np.arange(bps - 1, -1, -1)) & 1).astype(np.uint8)

    def axis_level(bits: np.ndarray) -> np.ndarray:
        g = np.zeros(bits.shape[0], dtype=np.int64)
        acc = np.zeros(bits.shape[0], dtype=np.int64)
        for j in range(half):
            acc ^= bits[:, j]  # Gray -> binary, MSB first
            g = (g << 1) | acc
        return 2 * g - (side - 1)

    i_lvl = axis_level(labels[:, :half].astype(np.int64))
    q_lvl = axis_level(labels[:, half:].astype(np.int64))
    energy = 2.0 * (order - 1) / 3.0  # 10 for 16-QAM, 170 for 256-QAM
    points = (i_lvl + 1j * q_lvl) / np.sqrt(energy)
    points.setflags(write=False)
    labels.setflags(write=False)
    return points, labels


def qam_modulate(bits: np.ndarray, order: int) -> np.ndarray:
    bps = _check_order(order)
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.size % bps:
        msg = f"qam_modulate: {bits.size} bits is not a multiple of {bps}"
        raise ContractError(msg)
    idx = bits.reshape(-1, bps).astype(np.int64) @ (1 << np.arange(bps - 1, -1, -1))
    return constellation(order)[0][idx]


def qam_hard_demod(symbols: np.ndarray, order: int) -> np.ndarray:
    points, labels = constellation(order)
    d = np.abs(np.asarray(symbols).reshape(-1, 1) - points[None]) ** 2
    return labels[np.argmin(d, axis=1)].reshape(-1)


@lru_cache(maxsize=None)
def _axis_table(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis amplitude levels ``(L,)`` and their Gray labels ``(L, log2 M / 2)``."""
    points, labels = constellation(order)
    half = labels.shape[1] // 2
    # points whose quadrature label is all zeros enumerate every in-phase level once
    rows = np.nonzero(~labels[:, half:].any(axis=1))[0]
    return points[rows].real.copy(), labels[rows, :half].copy()


def qam_llr(received: np.ndarray, gains: np.ndarray | complex, sigma2: float, order: int) -> np.ndarray:
    """Max-log LLRs, positive favouring bit 0.

    ``LLR_b = (min_{s: b=1} |y - h s|^2 - min_{s: b=0} |y - h s|^2) / sigma2``.
    For square Gray QAM the metric splits into in-phase and quadrature terms,
    ``|y - h s|^2 = |y|^2 + sum_axis (|h|^2 a^2 - 2 u a)`` with ``u = y conj(h)``,
    so each bit is searched over one axis's levels only.
    """
    if not sigma2 > 0:
        msg = f"qam_llr: noise variance must be positive, got {sigma2}"
        raise ContractError(msg)
    bps = _check_order(order)
    half = bps // 2
    levels, labels = _axis_table(order)
    y = np.asarray(received, dtype=np.complex128).reshape(-1)
    h = np.broadcast_to(np.asarray(gains, dtype=np.complex128), y.shape).reshape(-1)
    u = y * np.conj(h)
    g = (np.abs(h) ** 2)[:, None]
    out = np.empty((y.size, bps))
    for axis, comp in enumerate((u.real, u.imag)):
        d = g * levels[None] ** 2 - 2.0 * comp[:, None] * levels[None]  # (S, L)
        for j in range(half):
            zero = labels[:, j] == 0
            out[:, axis * half + j] = d[:, ~zero].min(axis=1) - d[:, zero].min(axis=1)
    return (out / sigma2).reshape(-1)


def qam_demodulate(symbols: np.ndarray, gains: np.ndarray | complex, sigma2: float, order: int) -> np.ndarray:
    """Soft demapper entry point; see :func:`qam_llr`."""
    return qam_llr(symbols, gains, sigma2, order)
