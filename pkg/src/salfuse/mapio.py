"""Saliency map and image file handling.

Maps travel as 8-bit grayscale PNG.  Loading divides by 255 into [0, 1];
saving multiplies by 255 and rounds half up, so load -> save reproduces a
valid input byte for byte.  Colour files presented where a map is expected
are averaged to gray with a warning; higher bit depths are refused.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .errors import ValidationError

GT_BINARIZE_THRESHOLD = 128  # on the 0..255 byte scale


def _open_image(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (FileNotFoundError, OSError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc
    return img


def _gray_bytes(path) -> np.ndarray:
    """Image file -> (H, W) uint8 grayscale array, strict about depth."""
    img = _open_image(path)
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise ValidationError(f"{path}: unsupported bit depth (mode {img.mode}), expected 8-bit")
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8)
    if img.mode in ("RGB", "RGBA", "P", "LA"):
        warnings.warn(f"{path}: colour input averaged to grayscale", stacklevel=2)
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
        mean = rgb.mean(axis=2)
        return np.floor(mean + 0.5).astype(np.uint8)
    raise ValidationError(f"{path}: unsupported image mode {img.mode!r}")


def load_map(path) -> np.ndarray:
    """Saliency map file -> (H, W) float64 values in [0, 1]."""
    return _gray_bytes(path).astype(np.float64) / 255.0


def load_gt(path) -> np.ndarray:
    """Ground-truth file -> (H, W) float64 binary map (byte >= 128 is 1)."""
    return (_gray_bytes(path) >= GT_BINARIZE_THRESHOLD).astype(np.float64)


def save_map(arr: np.ndarray, path) -> None:
    """Write an (H, W) map in [0, 1] as 8-bit grayscale PNG, rounding half up."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValidationError(f"save_map expects a 2-D map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("save_map: values must be finite and lie in [0, 1]")
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_rgb(path) -> np.ndarray:
    """Colour image file -> (3, H, W) float64 values in [0, 1]."""
    img = _open_image(path)
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise ValidationError(f"{path}: unsupported bit depth (mode {img.mode}), expected 8-bit")
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return rgb.transpose(2, 0, 1)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize over the last two axes, half-pixel centres.

    Same sampling convention as the differentiable resize, so maps moved
    through the network and maps moved through file I/O agree.
    """
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    my = ad._interp_matrix(h, out_h, np.float64)
    mx = ad._interp_matrix(w, out_w, np.float64)
    t = np.einsum("oh,...hw->...ow", my, arr)
    return np.einsum("pw,...ow->...op", mx, t)
