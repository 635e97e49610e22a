"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np

from .errors import DataError


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as P6."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an (H, W) uint8 array as P5."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"expected (H, W) uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported")
    n = w * h * channels
    body = data[pos:pos + n]
    if len(body) != n:
        raise DataError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)
