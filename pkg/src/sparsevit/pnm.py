"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]


def _header_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(blob[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode(blob: bytes) -> np.ndarray:
    """Return (H, W) uint8 for P5, (H, W, 3) uint8 for P6."""
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    (_, width, height, maxval), offset = _header_tokens(blob, 4)
    width, height, maxval = int(width), int(height), int(maxval)
    if maxval != 255:
        raise ValueError(f"only 8-bit images are supported (maxval={maxval})")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = blob[offset : offset + n]
    if len(raster) != n:
        raise ValueError(f"raster has {len(raster)} bytes, expected {n}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((height, width, 3) if channels == 3 else (height, width)).copy()


def encode(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {pixels.shape}")
    height, width = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (width, height)
    return header + np.ascontiguousarray(pixels).tobytes()


def read(path: PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write(path: PathLike, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode(pixels))


def normalize(pixels: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> np.ndarray:
    """uint8 RGB -> float32 in model units, per-channel ``(x/255 - mean) / std``."""
    x = pixels.astype(np.float32) / np.float32(255.0)
    x -= np.asarray(mean, dtype=np.float32)
    x /= np.asarray(std, dtype=np.float32)
    return x
