"""DLVOL1 volume files.

Layout, all little-endian::

    magic     6 bytes  b"DLVOL1"
    dtype     uint8    1 = float32 voxels, 2 = uint8 voxels (masks)
    D, H, W   3 x uint32
    spacing   3 x float64 (mm per voxel)
    voxels    D*H*W values, depth-major (C order)

Projections are stored with ``D = 1``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DLVOL1"
HEADER = struct.Struct("<6sB3I3d")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}


def save_volume(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"expected a 2D or 3D grid, got shape {data.shape}")
    if data.dtype == bool:
        data = data.astype(np.uint8)
    code = CODES.get(data.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {data.dtype}; use float32 or uint8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, code, *data.shape, *map(float, spacing)))
        fh.write(np.ascontiguousarray(data, dtype=DTYPES[code]).tobytes())
    return path


def load_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: file too short for a DLVOL1 header")
    magic, code, d, h, w, *spacing = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if code not in DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dt = DTYPES[code]
    n = d * h * w
    body = raw[HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n * dt.itemsize} voxel bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dt).reshape(d, h, w)
    return data.astype(dt.newbyteorder("=")), tuple(spacing)


def load_projection(path) -> np.ndarray:
    data, _ = load_volume(path)
    if data.shape[0] != 1:
        raise ValueError(f"{path}: not a projection (depth {data.shape[0]})")
    return data[0]
