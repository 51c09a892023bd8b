"""8-bit image emission for latents and per-step diagnostics.

Latents are rendered directly (no decoder): values are mapped linearly
from [-1, 1] to [0, 255].  Diagnostic frames (predicted originals,
guidance differences) use autoscaled grayscale PGMs because their
dynamic range varies wildly across sampling steps.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .errors import DimensionError

__all__ = ["channel_mean_frame", "to_uint8", "write_pgm", "write_png"]


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto [0, 255], clipping outliers."""
    arr = np.asarray(x, dtype=np.float64)
    return np.rint(np.clip((arr + 1.0) * 0.5, 0.0, 1.0) * 255.0).astype(np.uint8)


def _single_image(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(f"expected a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3:
        raise DimensionError(f"expected (C,H,W) or (1,C,H,W), got shape {arr.shape}")
    return arr


def write_png(path: Union[str, Path], x: np.ndarray) -> None:
    """Render a latent as PNG: 1 channel -> grayscale, >= 3 channels ->
    RGB from the first three."""
    arr = _single_image(x)
    channels = arr.shape[0]
    if channels == 1:
        img = Image.fromarray(to_uint8(arr[0]), mode="L")
    elif channels >= 3:
        img = Image.fromarray(np.stack([to_uint8(arr[c]) for c in range(3)], axis=-1), mode="RGB")
    else:
        raise DimensionError(f"cannot render {channels}-channel data as PNG")
    img.save(Path(path), format="PNG")


def channel_mean_frame(x: np.ndarray) -> np.ndarray:
    """Collapse (1,C,H,W) to a single (H,W) frame by channel averaging."""
    return _single_image(x).mean(axis=0)


def write_pgm(path: Union[str, Path], frame: np.ndarray, autoscale: bool = True) -> None:
    """Write a 2-D frame as binary PGM (P5).

    autoscale stretches [min, max] onto [0, 255]; a constant frame maps
    to mid gray.  With autoscale off the fixed [-1, 1] mapping is used.
    """
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"PGM frames must be 2-D, got shape {arr.shape}")
    if autoscale:
        lo, hi = float(arr.min()), float(arr.max())
        if hi - lo < 1e-12:
            data = np.full(arr.shape, 128, dtype=np.uint8)
        else:
            data = np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        data = to_uint8(arr)
    h, w = arr.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
