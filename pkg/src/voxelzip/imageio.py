"""Image output: 8-bit RGB PNG and a little-endian float32 planar dump."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadMagic, IoFailure, TruncatedSection

FLOAT_MAGIC = b"VZF1"
_FLOAT_HEAD = struct.Struct("<4sIII")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    try:
        Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def encode_float_planar(image: np.ndarray) -> bytes:
    """Header (magic, height, width, channels) then one float32 plane per channel."""
    img = np.asarray(image, dtype=np.float64)
    h, w, c = img.shape
    planes = np.ascontiguousarray(np.moveaxis(img, -1, 0), dtype="<f4")
    return _FLOAT_HEAD.pack(FLOAT_MAGIC, h, w, c) + planes.tobytes()


def decode_float_planar(data: bytes) -> np.ndarray:
    if data[:4] != FLOAT_MAGIC:
        raise BadMagic("not a float planar dump")
    _, h, w, c = _FLOAT_HEAD.unpack_from(data, 0)
    body = data[_FLOAT_HEAD.size:]
    if len(body) != 4 * h * w * c:
        raise TruncatedSection("float dump payload has the wrong size")
    return np.moveaxis(np.frombuffer(body, dtype="<f4").reshape(c, h, w), 0, -1).astype(np.float32)


def save_float_planar(path, image: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_float_planar(image))
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
