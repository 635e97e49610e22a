"""Binary checkpoint format.

Layout, all integers little-endian::

    b"SOIL"  uint32 version  32-byte config digest (sha256)
    repeated until EOF:
        uint16 name length, name (utf-8), uint8 rank, uint32 dims[rank],
        float32 data[prod(dims)]

Optimizer moments are stored as ordinary tensors named ``adam.m/<param>``,
``adam.v/<param>`` and the step counter as ``adam.step``.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import CheckpointError
from .optim import Adam

MAGIC = b"SOIL"
VERSION = 1
DIGEST_LEN = 32


def write_tensors(path: str | os.PathLike, digest: bytes, tensors: dict[str, np.ndarray]) -> None:
    if len(digest) != DIGEST_LEN:
        raise ValueError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def read_tensors(path: str | os.PathLike) -> tuple[int, bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, not a checkpoint")
    if len(buf) < 8 + DIGEST_LEN:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = buf[8:8 + DIGEST_LEN]
    pos = 8 + DIGEST_LEN
    tensors = {}

    def need(n):
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")

    while pos < len(buf):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        need(4 * count)
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos) \
            .reshape(dims).astype(np.float32)
        pos += 4 * count
    return version, digest, tensors


def save_checkpoint(path, model, optimizer: Adam | None = None) -> None:
    tensors = model.state_dict()
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    write_tensors(path, model.cfg.digest(), tensors)


def load_checkpoint(path, model, optimizer: Adam | None = None) -> int:
    """Load parameters (and optimizer state if given) into ``model``; returns the step."""
    _, digest, tensors = read_tensors(path)
    if digest != model.cfg.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different model config")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    try:
        model.load_state_dict(params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    step = int(tensors["adam.step"][0]) if "adam.step" in tensors else 0
    if optimizer is not None:
        if "adam.step" not in tensors:
            raise CheckpointError(f"{path}: no optimizer state stored")
        optimizer.load_state_dict(tensors)
    return step
