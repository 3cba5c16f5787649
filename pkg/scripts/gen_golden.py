"""Regenerate the PHY golden vectors in tests/golden.

Only the 802.11n prototype matrix is taken from the package; codewords and
the constellation table are rebuilt here by independent routes (a direct
GF(2) solve of H_p p = H_s s, and per-axis g ^ (g >> 1) Gray labels).
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from cmsc.phy.ldpc import BASE_MATRIX

Z = 27
OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def expand(base: np.ndarray) -> np.ndarray:
    rows, cols = base.shape
    h = np.zeros((rows * Z, cols * Z), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            s = base[r, c]
            if s < 0:
                continue
            for i in range(Z):
                h[r * Z + i, c * Z + (i + s) % Z] = 1
    return h


def solve_gf2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.copy() % 2
    b = b.copy() % 2
    n = a.shape[0]
    for col in range(n):
        piv = col + int(np.argmax(a[col:, col]))
        if a[piv, col] == 0:
            raise ValueError("singular")
        a[[col, piv]], b[[col, piv]] = a[[piv, col]], b[[piv, col]]
        for r in range(n):
            if r != col and a[r, col]:
                a[r] ^= a[col]
                b[r] ^= b[col]
    return b


def encode(h: np.ndarray, info: np.ndarray) -> np.ndarray:
    k = h.shape[1] - h.shape[0]
    rhs = (h[:, :k].astype(np.int64) @ info) % 2
    parity = solve_gf2(h[:, k:].astype(np.uint8), rhs.astype(np.uint8))
    return np.concatenate([info, parity]).astype(np.uint8)


def bits_hex(bits: np.ndarray) -> str:
    return np.packbits(bits.astype(np.uint8)).tobytes().hex()


def qam_table(order: int) -> list[tuple[int, complex]]:
    half = int(np.log2(order)) // 2
    side = 1 << half
    scale = np.sqrt(2.0 * (order - 1) / 3.0)
    table = []
    for i in range(side):
        for q in range(side):
            gi, gq = i ^ (i >> 1), q ^ (q >> 1)
            label = (gi << half) | gq
            table.append((label, complex(2 * i - (side - 1), 2 * q - (side - 1)) / scale))
    return sorted(table)


def main() -> int:
    OUT.mkdir(parents=True, exist_ok=True)
    h = expand(BASE_MATRIX)
    rng = np.random.default_rng(648)
    lines = ["# info_hex codeword_hex (802.11n rate-1/2 n=648, systematic)"]
    infos = [np.zeros(324, dtype=np.uint8), np.ones(324, dtype=np.uint8)]
    infos += [rng.integers(0, 2, 324).astype(np.uint8) for _ in range(14)]
    for info in infos:
        cw = encode(h, info)
        assert not ((h.astype(np.int64) @ cw) % 2).any()
        lines.append(f"{bits_hex(info)} {bits_hex(cw)}")
    (OUT / "ldpc_648_r12.hex").write_text("\n".join(lines) + "\n")

    for order in (16, 256):
        bps = int(np.log2(order))
        lines = [f"# label_hex real imag ({order}-QAM, MSB-first label: in-phase half then quadrature half)"]
        for label, pt in qam_table(order):
            lines.append(f"{label:0{(bps + 3) // 4}x} {pt.real:.17g} {pt.imag:.17g}")
        (OUT / f"qam{order}.hex").write_text("\n".join(lines) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
