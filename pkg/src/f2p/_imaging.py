"""Low-level raster helpers shared by the renderer, registration and crops.

Continuous pixel coordinates: pixel (row i, col j) covers [j, j+1) x [i, i+1),
so its center sits at (j + 0.5, i + 0.5).
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image


def warp_affine(image: np.ndarray, inv: np.ndarray, out_shape: tuple[int, int], fill: float) -> np.ndarray:
    """Bilinear resampling through an output->input affine map.

    ``inv`` is a 2x3 matrix taking output (x, y) to input (x, y).  Samples
    falling outside the source take ``fill``.  Works on float images and
    returns float64.
    """
    src = np.asarray(image, dtype=np.float64)
    h_in, w_in = src.shape
    h, w = out_shape
    ys, xs = np.mgrid[0:h, 0:w]
    xo = xs + 0.5
    yo = ys + 0.5
    xi = inv[0, 0] * xo + inv[0, 1] * yo + inv[0, 2] - 0.5
    yi = inv[1, 0] * xo + inv[1, 1] * yo + inv[1, 2] - 0.5
    x0 = np.floor(xi).astype(np.int64)
    y0 = np.floor(yi).astype(np.int64)
    fx = xi - x0
    fy = yi - y0
    padded = np.full((h_in + 2, w_in + 2), float(fill))
    padded[1:-1, 1:-1] = src
    # clamp into the padded border so far-away samples read the fill value
    xa = np.clip(x0 + 1, 0, w_in + 1)
    xb = np.clip(x0 + 2, 0, w_in + 1)
    ya = np.clip(y0 + 1, 0, h_in + 1)
    yb = np.clip(y0 + 2, 0, h_in + 1)
    top = padded[ya, xa] * (1.0 - fx) + padded[ya, xb] * fx
    bottom = padded[yb, xa] * (1.0 - fx) + padded[yb, xb] * fx
    return top * (1.0 - fy) + bottom * fy


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 255.0)).astype(np.uint8)


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | Path, image: np.ndarray) -> str:
    """Write an 8-bit PNG and return the sha256 of the written bytes."""
    data = png_bytes(image)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0] if arr.shape[2] in (1, 2) else np.asarray(Image.fromarray(arr).convert("L"))
    return np.array(arr, dtype=np.uint8)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
