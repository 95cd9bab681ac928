"""Image-processing kernels for the face preprocessing pipeline.

Conventions used throughout the package:

* An image is a ``numpy.ndarray`` of shape ``(channels, height, width)``
  (channel-planar, row-major) with ``float64`` intensities in ``[0, 1]``.
  Grayscale images have ``channels == 1``, color images ``channels == 3``.
* All filters handle borders by edge replication.
* Resampling uses half-pixel-centered coordinates: output pixel ``i`` samples
  the source at ``(i + 0.5) * in_size / out_size - 0.5``, with source
  coordinates clamped to the valid range (replication outside).
* 8-bit files map to ``[0, 1]`` by division by 255 on load; saving rounds
  ``value * 255`` back to 8-bit.

Separable convolutions accumulate relative to the window center
(``center + sum(k_i * (w_i - center))``), which keeps exactly-constant
regions bitwise constant; the difference-of-Gaussians response of a constant
image is therefore exactly zero.

All functions are pure: no shared mutable state, safe for concurrent use.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# Rec. 601 luminance weights.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def require_image(img: np.ndarray) -> np.ndarray:
    """Validate the (channels, height, width) image convention."""
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise ValueError(f"expected (channels, height, width) array, got shape {arr.shape}")
    if arr.shape[0] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {arr.shape[0]}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"empty image: shape {arr.shape}")
    return arr.astype(np.float64, copy=False)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Collapse to one channel: 0.299 R + 0.587 G + 0.114 B (identity for 1-channel)."""
    arr = require_image(img)
    if arr.shape[0] == 1:
        return arr.copy()
    return np.tensordot(_LUMA_WEIGHTS, arr, axes=([0], [0]))[np.newaxis]


def ensure_channels(img: np.ndarray, channels: int) -> np.ndarray:
    """Convert between 1- and 3-channel images (replicate or take luminance)."""
    arr = require_image(img)
    if channels not in (1, 3):
        raise ValueError(f"expected 1 or 3 target channels, got {channels}")
    if arr.shape[0] == channels:
        return arr
    if channels == 1:
        return to_grayscale(arr)
    return np.repeat(arr, 3, axis=0)


def _convolve1d_replicate(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate one spatial axis with a symmetric normalized kernel, edges replicated.

    Accumulates relative to the window center so constant regions are
    preserved exactly.
    """
    radius = kernel.size // 2
    if radius == 0:
        return img.copy()
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=axis)
    center = windows[..., radius]
    return center + (windows - center[..., np.newaxis]) @ kernel


def mean_filter(img: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k arithmetic-mean filter (separable box), edge-replicated borders."""
    arr = require_image(img)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {k}")
    kernel = np.full(k, 1.0 / k)
    out = _convolve1d_replicate(arr, kernel, axis=1)
    return _convolve1d_replicate(out, kernel, axis=2)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3 * sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian convolution, edge-replicated borders."""
    arr = require_image(img)
    kernel = gaussian_kernel(sigma)
    out = _convolve1d_replicate(arr, kernel, axis=1)
    return _convolve1d_replicate(out, kernel, axis=2)


def dog_response(img: np.ndarray, sigma_inner: float, sigma_outer: float) -> np.ndarray:
    """Raw difference-of-Gaussians band-pass response (no rescaling).

    Requires a grayscale input and 0 < sigma_inner < sigma_outer.
    """
    arr = require_image(img)
    if arr.shape[0] != 1:
        raise ValueError("difference-of-Gaussians expects a 1-channel image; convert to grayscale first")
    if not 0 < sigma_inner < sigma_outer:
        raise ValueError(f"need 0 < sigma_inner < sigma_outer, got {sigma_inner}, {sigma_outer}")
    return gaussian_blur(arr, sigma_inner) - gaussian_blur(arr, sigma_outer)


def dog_filter(img: np.ndarray, sigma_inner: float = 1.0, sigma_outer: float = 2.0) -> np.ndarray:
    """Difference-of-Gaussians edge enhancement, min-max rescaled to [0, 1].

    A degenerate all-equal response (e.g. a constant input) maps to 0.5.
    """
    response = dog_response(img, sigma_inner, sigma_outer)
    lo = response.min()
    hi = response.max()
    if hi > lo:
        return (response - lo) / (hi - lo)
    return np.full_like(response, 0.5)


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinearly sample continuous coordinates (integer coords = pixel centers).

    Coordinates outside the image are clamped, i.e. edge replication. ``x``
    and ``y`` share an arbitrary shape; the result has shape
    ``(channels, *x.shape)``. Interpolation uses the ``a + f * (b - a)`` form,
    so sampling at exact pixel centers reproduces stored values bitwise.
    """
    arr = require_image(img)
    _, h, w = arr.shape
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    top = arr[:, y0, x0]
    top = top + fx * (arr[:, y0, x1] - top)
    bottom = arr[:, y1, x0]
    bottom = bottom + fx * (arr[:, y1, x1] - bottom)
    return top + fy * (bottom - top)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centered sampling (align-corners false)."""
    arr = require_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    _, h, w = arr.shape
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return sample_bilinear(arr, grid_x, grid_y)


def degrade_resolution(img: np.ndarray, low: int = 112, size: int = 224) -> np.ndarray:
    """Simulate the sensor resolution gap: downsample to ``low``, back up to ``size``."""
    return resize_bilinear(resize_bilinear(img, low, low), size, size)


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG/JPEG/BMP raster as a float image in [0, 1]."""
    with PILImage.open(path) as raw:
        if raw.mode == "L":
            pil = raw.copy()
        elif raw.mode == "I;16":
            pil = raw.point(lambda v: v / 256).convert("L")
        else:
            pil = raw.convert("RGB")
    arr = np.asarray(pil, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[np.newaxis]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write an image to disk as an 8-bit raster (scale by 255, round)."""
    arr = require_image(img)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        pil = PILImage.fromarray(data[0], mode="L")
    else:
        pil = PILImage.fromarray(data.transpose(1, 2, 0), mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)
