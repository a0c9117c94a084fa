"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def encode(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim == 2:
        magic = b"P5"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode pixel array of shape {px.shape}")
    h, w = px.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + px.tobytes()


def write(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode(pixels))


def _tokens(blob: bytes, count: int):
    """Header fields, skipping whitespace and comments. Returns (fields, data offset)."""
    out, i = [], 0
    while len(out) < count:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PNM header")
        out.append(blob[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte before the raster


def decode(blob: bytes) -> np.ndarray:
    (magic, w, h, maxval), off = _tokens(blob, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only 8-bit PNM supported, maxval={maxval}")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"unsupported PNM magic {magic!r}")
    n = w * h * channels
    if len(blob) - off < n:
        raise ValueError(f"PNM raster truncated: need {n} bytes at offset {off}, have {len(blob) - off}")
    px = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off)
    return px.reshape(h, w) if channels == 1 else px.reshape(h, w, 3)


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
