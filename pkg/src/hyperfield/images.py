"""PNG helpers for masks, composites, and grayscale maps (Pillow-backed)."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .cube import Mask
from .errors import FormatError


def write_png(array: np.ndarray, path) -> None:
    """Write a uint8 array (H, W) or (H, W, 3) as a PNG file."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise FormatError(f"write_png expects uint8, got {arr.dtype}")
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG as a uint8 array; RGB(A) is kept, palettes are expanded."""
    with Image.open(path) as img:
        if img.mode == "P":
            img = img.convert("RGB")
        return np.asarray(img)


def float_to_png(array: np.ndarray, path, normalize: bool = False) -> None:
    """Write a float image in [0, 1] (or arbitrary range if ``normalize``) as PNG."""
    arr = np.asarray(array, dtype=np.float64)
    if normalize:
        finite = arr[np.isfinite(arr)]
        lo = finite.min() if finite.size else 0.0
        hi = finite.max() if finite.size else 1.0
        span = hi - lo
        arr = np.where(np.isfinite(arr), (arr - lo) / span if span > 0 else 0.0, 0.0)
    write_png((np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8), path)


def mask_to_png(mask: Mask, path) -> None:
    write_png(np.where(mask.values, 255, 0).astype(np.uint8), path)


def mask_from_png(path) -> Mask:
    """Load a mask PNG; any channel value above 127 counts as foreground."""
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., :3].max(axis=-1)
    return Mask(values=arr > 127)


def side_by_side(left: np.ndarray, right: np.ndarray, gap: int = 4) -> np.ndarray:
    """Concatenate two uint8 RGB images horizontally with a white gap."""
    if left.shape[0] != right.shape[0]:
        raise FormatError("side_by_side requires equal image heights")
    spacer = np.full((left.shape[0], gap, 3), 255, dtype=np.uint8)
    return np.concatenate([left, spacer, right], axis=1)
