"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit samples."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

_MAGIC = {b"P5": 1, b"P6": 3}


class PNMError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PNMError("truncated header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PNMError("missing whitespace after maxval")
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to ``uint8`` of shape ``(h, w)`` or ``(h, w, 3)``."""
    tokens, offset = _header_tokens(data, 4)
    magic, width, height, maxval = tokens
    if magic not in _MAGIC:
        raise PNMError(f"unsupported format {magic!r}; expected P5 or P6")
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise PNMError("non-numeric header field") from None
    if width <= 0 or height <= 0:
        raise PNMError("image dimensions must be positive")
    if not 0 < maxval <= 255:
        raise PNMError(f"maxval {maxval} not supported (8-bit only)")
    channels = _MAGIC[magic]
    size = width * height * channels
    raster = data[offset : offset + size]
    if len(raster) < size:
        raise PNMError(f"expected {size} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape((height, width, channels) if channels == 3 else (height, width))
    if maxval != 255:
        arr = np.rint(arr.astype(float) * (255.0 / maxval)).astype(np.uint8)
    return arr.copy()


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise PNMError(f"expected uint8 samples, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"cannot encode array of shape {image.shape}")
    h, w = image.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(image))


def to_unit(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=float) / 255.0


def from_unit(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(samples, dtype=float) * 255.0), 0, 255).astype(np.uint8)
