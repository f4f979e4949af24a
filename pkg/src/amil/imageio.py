"""8-bit RGB image files: binary PPM (P6) handled here, PNG through Pillow."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .errors import ContractError, IngestionError

_PPM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n)*([^\s#]+)")


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file with maxval 255 as an ``H×W×3`` uint8 array."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PPM_TOKEN.match(raw, pos)
        if m is None:
            raise IngestionError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, width, height, maxval = tokens
    if magic != b"P6":
        raise IngestionError(f"{path}: not a binary PPM (magic {magic!r})")
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise IngestionError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise IngestionError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise IngestionError(f"{path}: expected {need} raster bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ppm", ".pnm"):
        return read_ppm(path)
    if ext == ".png":
        return read_png(path)
    raise IngestionError(f"{path}: unsupported image type {ext!r} (expected .png or .ppm)")


def write_image(path, pixels: np.ndarray) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ppm", ".pnm"):
        write_ppm(path, pixels)
    elif ext == ".png":
        write_png(path, pixels)
    else:
        raise ContractError(f"{path}: unsupported image type {ext!r} (expected .png or .ppm)")
