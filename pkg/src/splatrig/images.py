"""8-bit PNG I/O for float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8 by round-half-even."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def save_png(img: np.ndarray, path: str | Path) -> None:
    """Write a float [0,1] (H, W, 3) or (H, W) image as 8-bit PNG."""
    arr = to_uint8(img)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(Path(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1]; RGB images come back (H, W, 3)."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return from_uint8(arr)
