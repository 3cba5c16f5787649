"""Binary checkpoint format.

Layout (little-endian)::

    b"CMSCCKPT"  uint32 version  uint32 meta_len  meta (UTF-8 JSON)
    uint32 count
    count x [uint16 name_len, name (UTF-8), uint8 kind (0 param, 1 buffer),
             uint8 ndim, ndim x uint32 dims, float64 data in C order]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from cmsc.errors import ContractError

MAGIC = b"CMSCCKPT"
VERSION = 1
_KINDS = ("param", "buffer")


def state_dict(modules: dict) -> dict[str, tuple[str, np.ndarray]]:
    out = {}
    for prefix, mod in modules.items():
        for name, p in mod.named_parameters(f"{prefix}."):
            out[name] = ("param", p)
        for name, b in mod.named_buffers(f"{prefix}."):
            out[name] = ("buffer", b)
    return out


def checkpoint_bytes(modules: dict, meta: dict | None = None) -> bytes:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    entries = state_dict(modules)
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(entries))]
    for name, (kind, arr) in entries.items():
        raw = name.encode()
        parts.append(struct.pack("<HBB", len(raw), _KINDS.index(kind), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> tuple[dict, dict[str, tuple[str, np.ndarray]]]:
    if data[:8] != MAGIC:
        msg = "not a CMSC checkpoint (bad magic)"
        raise ContractError(msg)
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        msg = f"unsupported checkpoint version {version}"
        raise ContractError(msg)
    off = 16
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    entries = {}
    try:
        for _ in range(count):
            name_len, kind, ndim = struct.unpack_from("<HBB", data, off)
            off += 4
            name = data[off:off + name_len].decode()
            off += name_len
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, "<f8", size, off).reshape(shape).astype(np.float64)
            off += 8 * size
            entries[name] = (_KINDS[kind], arr)
    except (struct.error, ValueError, IndexError) as exc:
        msg = f"truncated or corrupt checkpoint: {exc}"
        raise ContractError(msg) from exc
    if off != len(data):
        msg = f"checkpoint has {len(data) - off} trailing bytes"
        raise ContractError(msg)
    return meta, entries


def save_checkpoint(path: str | Path, modules: dict, meta: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(modules, meta))


def load_into(modules: dict, entries: dict[str, tuple[str, np.ndarray]]) -> None:
    """Copy checkpoint arrays into the modules in place (shapes must match)."""
    target = state_dict(modules)
    missing = sorted(set(target) - set(entries))
    extra = sorted(set(entries) - set(target))
    if missing or extra:
        msg = f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        raise ContractError(msg)
    for name, (kind, arr) in target.items():
        src = entries[name][1]
        if src.shape != arr.shape:
            msg = f"checkpoint {name}: shape {src.shape} != model {arr.shape}"
            raise ContractError(msg)
        arr[...] = src


def load_checkpoint(path: str | Path, modules: dict) -> dict:
    path = Path(path)
    if not path.is_file():
        msg = f"checkpoint not found: {path}"
        raise ContractError(msg)
    meta, entries = parse_checkpoint(path.read_bytes())
    load_into(modules, entries)
    return meta
