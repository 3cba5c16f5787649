"""Classic digital baseline: 8-bit quantization, QC-LDPC coding and Gray QAM."""

from cmsc.phy.budget import (CODE_RATE, ClassicStats, channel_uses, classic_symbol_count,
                             parity_lambda, transmit_classic, transmit_classic_batch)
from cmsc.phy.ldpc import (BASE_MATRIX, Codeword, ldpc_decode, ldpc_decode_batch, ldpc_encode,
                           ldpc_encode_batch, parity_check_matrix, syndrome)
from cmsc.phy.qam import constellation, qam_demodulate, qam_hard_demod, qam_llr, qam_modulate
from cmsc.phy.quantize import BitStream, dequantize, quantize

__all__ = [
    "BASE_MATRIX", "CODE_RATE", "BitStream", "ClassicStats", "Codeword", "channel_uses",
    "classic_symbol_count", "constellation", "dequantize", "ldpc_decode", "ldpc_decode_batch",
    "ldpc_encode", "ldpc_encode_batch", "parity_check_matrix", "parity_lambda", "qam_hard_demod",
    "qam_demodulate", "qam_llr", "qam_modulate", "quantize", "syndrome", "transmit_classic",
    "transmit_classic_batch",
]
