"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255.

Images are returned as float arrays of shape (C, H, W) in [0, 1] (v / 255).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DataError

PathLike = Union[str, os.PathLike]
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out: list[bytes] = []
    pos = 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos + 1  # exactly one whitespace byte separates header and raster


def decode(data: bytes, name: str = "<bytes>") -> np.ndarray:
    try:
        (magic, w, h, maxval), offset = _tokens(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except (DataError, ValueError) as exc:
        raise DataError(f"{name}: malformed PNM header ({exc})") from None
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{name}: unsupported PNM type {magic!r}; only P5/P6 are read")
    if maxval != 255:
        raise DataError(f"{name}: maxval {maxval} unsupported (need 255)")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    raster = data[offset:offset + size]
    if len(raster) != size:
        raise DataError(f"{name}: raster truncated ({len(raster)} of {size} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_image(path: PathLike) -> np.ndarray:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {p}: {exc}") from None
    return decode(data, str(p))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise DataError(f"cannot encode an image with {c} channels")
    magic = b"P5" if c == 1 else b"P6"
    raster = to_uint8(img).transpose(1, 2, 0).tobytes()
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raster


def write_image(path: PathLike, img: np.ndarray) -> None:
    """Write (C, H, W) or (H, W) data in [0, 1]; values are clipped for export."""
    Path(path).write_bytes(encode(img))


def list_images(directory: PathLike) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
