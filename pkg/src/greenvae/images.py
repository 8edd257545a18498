"""Binary PGM/PPM image grids."""

from __future__ import annotations

import logging
import math
import os

import numpy as np

GUTTER = 2
log = logging.getLogger(__name__)


def grid_canvas(images, cols: int, gutter: int = GUTTER) -> tuple[np.ndarray, int]:
    """Tile (n, H, W, C) images row-major with black gutters between tiles.

    Returns the uint8 canvas and the number of pixels clamped into [0, 1].
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] not in (1, 3):
        raise ValueError(f"images must be (n, H, W, 1|3), got {x.shape}")
    if cols <= 0:
        raise ValueError("cols must be positive")
    n, h, w, c = x.shape
    clamped = int(np.count_nonzero((x < 0) | (x > 1) | ~np.isfinite(x)))
    x = np.clip(np.nan_to_num(x, nan=0.0), 0.0, 1.0)
    cols = min(cols, n)
    rows = math.ceil(n / cols)
    canvas = np.zeros((rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter, c), dtype=np.uint8)
    pix = np.rint(x * 255).astype(np.uint8)
    for i in range(n):
        r, q = divmod(i, cols)
        top, left = r * (h + gutter), q * (w + gutter)
        canvas[top:top + h, left:left + w] = pix[i]
    return canvas, clamped


def write_image_grid(images, cols: int, path: str) -> int:
    """Write a P5 (1 channel) or P6 (3 channels) grid; returns the clamped-pixel count."""
    canvas, clamped = grid_canvas(images, cols)
    if clamped:
        log.warning("write_image_grid: %d out-of-range pixel values clamped", clamped)
    h, w, c = canvas.shape
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.access(parent, os.W_OK):
        raise OSError(f"cannot write image to {path!r}")
    with open(path, "wb") as fh:
        fh.write(header + canvas.tobytes())
    return clamped


def read_pnm(path: str) -> np.ndarray:
    """Read a binary P5/P6 file as (H, W, C) floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported image ({magic!r}, maxval {maxval})")
    c = 1 if magic == b"P5" else 3
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return arr.reshape(h, w, c).astype(np.float32) / 255.0


def split_grid(canvas: np.ndarray, tile_h: int, tile_w: int, gutter: int = GUTTER) -> np.ndarray:
    """Inverse of the grid layout: recover (n, H, W, C) tiles."""
    h, w, c = canvas.shape
    rows = (h + gutter) // (tile_h + gutter)
    cols = (w + gutter) // (tile_w + gutter)
    tiles = []
    for r in range(rows):
        for q in range(cols):
            top, left = r * (tile_h + gutter), q * (tile_w + gutter)
            tiles.append(canvas[top:top + tile_h, left:left + tile_w])
    return np.stack(tiles)
