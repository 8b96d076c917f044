"""sRGB / linear RGB / grayscale / CIELAB conversions and 8-bit raster I/O.

Conventions used throughout the package:

* a pixel image is a float array of shape (H, W, 3) with sRGB-encoded values
  in [0, 1] (8-bit files decode as n/255 exactly);
* a LAB image has the same shape with L in [0, 100] and a, b in roughly
  [-128, 128], D65 white point, 2 degree observer.

Functions accept any (..., 3) array, so single pixels and batches work too.
All conversions are pure functions and safe for concurrent use.
"""

import numpy as np
from PIL import Image

from . import _kernels

# Rec. 709 luma weights, applied in linear light.
GRAY_WEIGHTS = np.array([0.2126, 0.7152, 0.0722], dtype=np.float64)


class ColorspaceError(ValueError):
    pass


def _check_rgb(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ColorspaceError(f"expected (..., 3) array, got shape {arr.shape}")
    if arr.ndim >= 3 and (arr.shape[-3] < 1 or arr.shape[-2] < 1):
        raise ColorspaceError(f"degenerate image shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ColorspaceError("non-finite pixel values")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ColorspaceError(
            f"pixel values outside [0, 1]: min={arr.min()}, max={arr.max()}")
    return np.clip(arr, 0.0, 1.0)


def rgb_to_lab(img):
    """sRGB [0,1] -> CIELAB. White maps to (100, 0, 0), black to (0, 0, 0)."""
    return _kernels.rgb_to_lab(_check_rgb(img))


def lab_to_rgb(lab, return_clip_count=False):
    """CIELAB -> sRGB [0,1]; out-of-gamut channels are clamped.

    With return_clip_count=True also returns how many channel values fell
    outside [0, 1] before clamping (gamut diagnostics).
    """
    arr = np.asarray(lab, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ColorspaceError(f"expected (..., 3) array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ColorspaceError("non-finite LAB values")
    rgb, n_clipped = _kernels.lab_to_rgb(arr)
    if return_clip_count:
        return rgb, n_clipped
    return rgb


def to_grayscale(img):
    """Replace each pixel by its Rec. 709 relative luminance (computed in
    linear light, re-encoded to sRGB), replicated over the three channels.

    Idempotent, and the identity on achromatic images.
    """
    arr = _check_rgb(img)
    lin = _kernels.srgb_decode(arr)
    luma = lin @ GRAY_WEIGHTS
    gray = np.clip(_kernels.srgb_encode(luma), 0.0, 1.0)
    return np.repeat(gray[..., np.newaxis], 3, axis=-1)


def srgb_to_linear(img):
    return _kernels.srgb_decode(_check_rgb(img))


def linear_to_srgb(img):
    return np.clip(_kernels.srgb_encode(np.asarray(img, dtype=np.float64)), 0.0, 1.0)


def load_image(path):
    """Decode an 8-bit PNG/JPEG to (H, W, 3) float64 in [0, 1] (exactly n/255)."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64)
    return arr / 255.0


def save_image(path, img):
    """Write (H, W, 3) float [0,1] as an 8-bit raster (format from extension)."""
    arr = _check_rgb(img)
    data = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def quantize8(img):
    """Round-trip through the 8-bit representation used on disk."""
    arr = _check_rgb(img)
    return np.rint(arr * 255.0).astype(np.uint8).astype(np.float64) / 255.0
