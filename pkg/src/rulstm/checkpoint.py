"""Checkpoint container for model parameters and optimizer state.

Layout (all integers little-endian):

  magic ``RUCK`` | u32 version=1 | u32 block count |
  per block: u32 name length, name (utf-8), u64 rows, u64 cols,
             rows*cols little-endian float64 values |
  u64 metadata length | metadata JSON (utf-8)

Blocks are written sorted by name and the metadata JSON uses sorted keys, so
identical state always serializes to identical bytes.  One-dimensional arrays
are stored as a single row.  Optimizer velocity buffers ride along as blocks
prefixed ``velocity.``; the metadata blob carries the optimizer
hyperparameters and training history.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

RUCK_MAGIC = b"RUCK"
RUCK_VERSION = 1


def save_checkpoint(path, blocks: dict[str, np.ndarray], metadata: dict):
    payload = bytearray()
    payload += RUCK_MAGIC
    payload += struct.pack("<II", RUCK_VERSION, len(blocks))
    for name in sorted(blocks):
        arr = np.asarray(blocks[name], dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"block {name!r} must be 1-D or 2-D, got {arr.shape}")
        encoded = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded))
        payload += encoded
        payload += struct.pack("<QQ", arr.shape[0], arr.shape[1])
        payload += arr.astype("<f8").tobytes()
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload += struct.pack("<Q", len(meta))
    payload += meta
    Path(path).write_bytes(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != RUCK_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != RUCK_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 12
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = struct.unpack_from("<QQ", raw, offset)
        offset += 16
        n = rows * cols
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).copy()
        offset += 8 * n
        blocks[name] = arr.reshape(rows, cols)
    (meta_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    metadata = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    return blocks, metadata


def assign_blocks(targets: dict[str, np.ndarray], loaded: dict[str, np.ndarray],
                  *, prefix: str = ""):
    """Copy loaded blocks into live parameter arrays, matched by name.

    ``prefix`` selects a namespace inside the checkpoint (and is stripped);
    shapes may differ in rank (1-D targets accept single-row blocks) but
    never in size.
    """
    missing = []
    for name, target in targets.items():
        src = loaded.get(prefix + name)
        if src is None:
            missing.append(prefix + name)
            continue
        if src.size != target.size:
            raise ValueError(
                f"block {prefix + name!r}: size {src.size} != expected {target.size}")
        target[...] = src.reshape(target.shape)
    if missing:
        raise KeyError(f"checkpoint lacks blocks: {missing}")
