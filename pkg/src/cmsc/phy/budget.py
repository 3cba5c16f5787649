"""Channel-use accounting and the classic (quantize, LDPC, QAM) transmission chain."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cmsc.channel import apply_channel
from cmsc.errors import ContractError
from cmsc.phy.ldpc import K as INFO_BITS
from cmsc.phy.ldpc import N as CODE_BITS
from cmsc.phy.ldpc import ldpc_decode_batch, ldpc_encode_batch
from cmsc.phy.qam import qam_llr, qam_modulate
from cmsc.phy.quantize import BITS_PER_VALUE, BitStream, dequantize, quantize

CODE_RATE = INFO_BITS / CODE_BITS


def channel_uses(map_size: int, lam: float, code_rate: float = CODE_RATE, order: int = 16) -> float:
    """Nominal complex channel uses ``S * lam * 8 / (R_c log2 M)``."""
    if code_rate <= 0 or order < 2:
        msg = f"channel_uses: bad code rate {code_rate} or order {order}"
        raise ContractError(msg)
    return map_size * lam * BITS_PER_VALUE / (code_rate * math.log2(order))


def parity_lambda(lam_jscc: float, order: int, code_rate: float = CODE_RATE) -> float:
    """Baseline selection ratio that spends the same channel uses as JSCC at ``lam_jscc``."""
    return lam_jscc * code_rate * math.log2(order) / BITS_PER_VALUE


def classic_symbol_count(values: int, order: int) -> int:
    """Symbols actually sent for ``values`` 8-bit values, padded to whole codewords."""
    codewords = math.ceil(values * BITS_PER_VALUE / INFO_BITS)
    return codewords * CODE_BITS // int(math.log2(order))


@dataclass
class ClassicStats:
    symbols: int
    codewords: int
    failed_codewords: int
    bit_errors: int


def transmit_classic_batch(packs: np.ndarray, order: int, channel: str, snrs, rng: np.random.Generator
                           ) -> tuple[np.ndarray, list[ClassicStats]]:
    """Send ``(P, K, C)`` packs, each through quantize, LDPC, QAM, the channel and back.

    Every pack has its own quantizer range, codewords and SNR; LDPC decoding
    runs over all codewords together.  Side information (min, step, shape)
    travels error-free.
    """
    packs = np.asarray(packs, dtype=np.float64)
    if packs.ndim != 3:
        msg = f"transmit_classic: expected (P, K, C) packs, got {packs.shape}"
        raise ContractError(msg)
    p = packs.shape[0]
    snrs = np.broadcast_to(np.asarray(snrs, dtype=np.float64), (p,))
    streams = [quantize(x) for x in packs]
    n_bits = streams[0].bits.size
    n_cw = max(1, math.ceil(n_bits / INFO_BITS))
    info = np.zeros((p, n_cw * INFO_BITS), dtype=np.uint8)
    for i, st in enumerate(streams):
        info[i, :n_bits] = st.bits
    code = ldpc_encode_batch(info.reshape(p * n_cw, INFO_BITS)).reshape(p, -1)
    llr = np.empty(code.shape)
    n_sym = code.shape[1] // int(math.log2(order))
    for i in range(p):
        tx = qam_modulate(code[i], order)
        rx, gains, sigma2 = apply_channel(tx, channel, float(snrs[i]), rng)
        llr[i] = qam_llr(rx, gains, max(sigma2, 1e-12), order)
    dec, conv, _ = ldpc_decode_batch(llr.reshape(p * n_cw, CODE_BITS))
    dec = dec.reshape(p, -1)[:, :n_bits]
    conv = conv.reshape(p, n_cw)
    out = np.empty_like(packs)
    stats = []
    for i, st in enumerate(streams):
        out[i] = dequantize(BitStream(dec[i], st.rows, st.channels, st.vmin, st.step))
        stats.append(ClassicStats(n_sym, n_cw, int((~conv[i]).sum()), int((dec[i] != st.bits).sum())))
    return out, stats


def transmit_classic(rows: np.ndarray, order: int, channel: str, snr_db: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, ClassicStats]:
    """Single-pack form of :func:`transmit_classic_batch` for a ``(K, C)`` pack."""
    out, stats = transmit_classic_batch(np.asarray(rows)[None], order, channel, snr_db, rng)
    return out[0], stats[0]
