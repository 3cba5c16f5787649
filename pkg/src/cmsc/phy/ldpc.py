"""IEEE 802.11n rate-1/2, n = 648 (Z = 27) quasi-cyclic LDPC code.

Encoding is systematic (info bits first).  Decoding is normalized min-sum
belief propagation, vectorized over a batch of codewords.  LLR convention:
positive means bit 0 is more likely.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from cmsc.errors import ContractError

Z = 27
N = 648
K = 324
CODE_ID = "802.11n-648-r1/2"

# prototype matrix, -1 = all-zero block, s >= 0 = identity cyclically shifted by s
BASE_MATRIX = np.array([
    [0, -1, -1, -1, 0, 0, -1, -1, 0, -1, -1, 0, 1, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [22, 0, -1, -1, 17, -1, 0, 0, 12, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1],
    [6, -1, 0, -1, 10, -1, -1, -1, 24, -1, 0, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1, -1, -1],
    [2, -1, -1, 0, 20, -1, -1, -1, 25, 0, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1, -1],
    [23, -1, -1, -1, 3, -1, -1, -1, 0, -1, 9, 11, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1],
    [24, -1, 23, 1, 17, -1, 3, -1, 10, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1],
    [25, -1, -1, -1, 8, -1, -1, -1, 7, 18, -1, -1, 0, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1],
    [13, 24, -1, -1, 0, -1, 8, -1, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1],
    [7, 20, -1, 16, 22, 10, -1, -1, 23, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1],
    [11, -1, -1, -1, 19, -1, -1, -1, 13, -1, 3, 17, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0, -1],
    [25, -1, 8, -1, 23, 18, -1, 14, 9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0],
    [3, -1, -1, -1, 16, -1, -1, 2, 25, 5, -1, -1, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0],
], dtype=np.int64)

MIN_SUM_SCALE = 0.8
MAX_ITERATIONS = 25
DECODE_CHUNK = 512  # codewords per vectorized pass; bounds message memory


@dataclass
class Codeword:
    bits: np.ndarray
    n: int = N
    k: int = K
    code_id: str = CODE_ID


@lru_cache(maxsize=1)
def parity_check_matrix() -> np.ndarray:
    """Dense ``(324, 648)`` uint8 parity-check matrix."""
    rows, cols = BASE_MATRIX.shape
    h = np.zeros((rows * Z, cols * Z), dtype=np.uint8)
    eye = np.arange(Z)
    for r in range(rows):
        for c in range(cols):
            s = BASE_MATRIX[r, c]
            if s >= 0:
                h[r * Z + eye, c * Z + (eye + s) % Z] = 1
    h.setflags(write=False)
    return h


def _gf2_inverse(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    aug = np.concatenate([a.astype(np.uint8) & 1, np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        pivots = np.nonzero(aug[col:, col])[0]
        if pivots.size == 0:
            msg = "parity part of H is singular over GF(2)"
            raise ContractError(msg)
        p = col + pivots[0]
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        hits = np.nonzero(aug[:, col])[0]
        hits = hits[hits != col]
        aug[hits] ^= aug[col]
    return aug[:, n:]


@lru_cache(maxsize=1)
def _parity_generator() -> np.ndarray:
    """``P`` with ``parity = P @ info (mod 2)``, i.e. ``H_p^-1 H_s``."""
    h = parity_check_matrix()
    hs, hp = h[:, :K], h[:, K:]
    p = (_gf2_inverse(hp).astype(np.int64) @ hs.astype(np.int64)) % 2
    p = p.astype(np.uint8)
    p.setflags(write=False)
    return p


def ldpc_encode_batch(info: np.ndarray) -> np.ndarray:
    """Encode ``(B, 324)`` info bits into ``(B, 648)`` systematic codewords."""
    info = np.asarray(info, dtype=np.uint8)
    if info.ndim != 2 or info.shape[1] != K:
        msg = f"ldpc_encode: expected (B, {K}) info bits, got {info.shape}"
        raise ContractError(msg)
    parity = (info.astype(np.int64) @ _parity_generator().T.astype(np.int64)) % 2
    return np.concatenate([info, parity.astype(np.uint8)], axis=1)


def ldpc_encode(info: np.ndarray) -> Codeword:
    info = np.asarray(info, dtype=np.uint8)
    if info.shape != (K,):
        msg = f"ldpc_encode: expected exactly {K} info bits, got {info.shape}"
        raise ContractError(msg)
    return Codeword(ldpc_encode_batch(info[None])[0])


@lru_cache(maxsize=1)
def _h_transpose_float() -> np.ndarray:
    return np.ascontiguousarray(parity_check_matrix().T, dtype=np.float64)


def syndrome(bits: np.ndarray) -> np.ndarray:
    # float matmul goes through BLAS; check-node degrees keep the sums exact
    counts = np.asarray(bits, dtype=np.float64) @ _h_transpose_float()
    return (counts.astype(np.int64) % 2).astype(np.uint8)


@lru_cache(maxsize=1)
def _graph():
    """Padded (check, slot) -> variable map, its validity mask and the sparse slot incidence."""
    h = parity_check_matrix()
    chk, var = np.nonzero(h)
    deg = np.bincount(chk, minlength=h.shape[0])
    dmax = int(deg.max())
    var_slot = np.zeros((h.shape[0], dmax), dtype=np.int64)
    valid = np.zeros((h.shape[0], dmax), dtype=bool)
    pos = np.zeros(h.shape[0], dtype=np.int64)
    for c, v in zip(chk, var):
        var_slot[c, pos[c]] = v
        valid[c, pos[c]] = True
        pos[c] += 1
    flat = np.nonzero(valid.ravel())[0]
    # (checks * dmax, N): sums slot messages into per-variable totals
    incidence = sp.csr_matrix((np.ones(flat.size), (flat, var_slot.ravel()[flat])),
                              shape=(valid.size, N))
    return var_slot, valid, incidence.T.tocsr()


def ldpc_decode_batch(llrs: np.ndarray, *, max_iterations: int = MAX_ITERATIONS,
                      scale: float = MIN_SUM_SCALE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized min-sum on ``(B, 648)`` LLRs.

    Returns ``(info (B, 324), converged (B,), iterations (B,))``; a codeword
    whose channel hard decision already satisfies every check reports 0
    iterations.
    """
    llrs = np.asarray(llrs, dtype=np.float64)
    if llrs.ndim != 2 or llrs.shape[1] != N:
        msg = f"ldpc_decode: expected (B, {N}) LLRs, got {llrs.shape}"
        raise ContractError(msg)
    if llrs.shape[0] > DECODE_CHUNK:
        parts = [ldpc_decode_batch(llrs[i:i + DECODE_CHUNK], max_iterations=max_iterations, scale=scale)
                 for i in range(0, llrs.shape[0], DECODE_CHUNK)]
        return tuple(np.concatenate(x) for x in zip(*parts))
    var_slot, valid, gather_t = _graph()
    b = llrs.shape[0]
    hard = (llrs < 0).astype(np.uint8)
    converged = ~syndrome(hard).any(axis=1)
    iterations = np.zeros(b, dtype=np.int64)
    active = np.nonzero(~converged)[0]
    if active.size == 0:
        return hard[:, :K], converged, iterations

    ch = llrs[active]
    total = ch.copy()
    c2v = np.zeros((active.size,) + valid.shape)
    slot_ids = np.arange(valid.shape[1])
    for it in range(1, max_iterations + 1):
        v2c = total[:, var_slot] - c2v  # (A, checks, dmax)
        mag = np.where(valid, np.abs(v2c), np.inf)
        neg = (v2c < 0) & valid
        sign_all = 1.0 - 2.0 * (np.count_nonzero(neg, axis=2) % 2)
        two = np.partition(mag, 1, axis=2)
        min1, min2 = two[..., 0], two[..., 1]
        idx_min = np.argmin(mag, axis=2)
        excl = np.where(slot_ids == idx_min[..., None], min2[..., None], min1[..., None])
        c2v = np.where(valid, (scale * sign_all)[..., None] * np.where(neg, -excl, excl), 0.0)
        total = ch + (gather_t @ c2v.reshape(active.size, -1).T).T
        dec = (total < 0).astype(np.uint8)
        ok = ~syndrome(dec).any(axis=1)
        hard[active] = dec
        iterations[active] = it
        converged[active] = ok
        keep = ~ok
        if not keep.any():
            break
        active, ch, c2v, total = active[keep], ch[keep], c2v[keep], total[keep]
    return hard[:, :K], converged, iterations


def ldpc_decode(llrs: np.ndarray, **kwargs) -> tuple[np.ndarray, bool, int]:
    """Decode one codeword's ``n`` LLRs into ``(info bits, converged, iterations)``."""
    llrs = np.asarray(llrs, dtype=np.float64)
    if llrs.shape != (N,):
        msg = f"ldpc_decode: expected {N} LLRs, got {llrs.shape}"
        raise ContractError(msg)
    info, conv, its = ldpc_decode_batch(llrs[None], **kwargs)
    return info[0], bool(conv[0]), int(its[0])
