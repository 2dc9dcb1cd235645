"""Pixel operations the models consume.

Images are float64 numpy arrays shaped (H, W, C) with C in {1, 3} and a
nominal range of [0, 255]. Difference images keep their sign.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageError(ValueError):
    pass


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains non-finite values")
    return arr


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ImageError(f"image shapes differ: {a.shape} vs {b.shape}")


def subtract(pre, post) -> np.ndarray:
    """``post - pre`` channel-wise, unclipped."""
    pre, post = as_image(pre), as_image(post)
    _check_same(pre, post)
    return post - pre


def normalize(img) -> np.ndarray:
    return as_image(img) / 255.0


def to_luma(img) -> np.ndarray:
    """(H, W) luma plane; single-channel images pass through."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA_WEIGHTS


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0
    window_size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.window_size < 1 or self.sigma <= 0:
            raise ValueError("window must have positive size and sigma")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def window(self) -> np.ndarray:
        """Separable 1-D Gaussian taps; the 2-D window is their outer product."""
        r = (self.window_size - 1) / 2.0
        x = np.arange(self.window_size) - r
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()


def _filter_valid(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = len(taps)
    rows = sliding_window_view(plane, n, axis=0) @ taps
    return sliding_window_view(rows, n, axis=1) @ taps


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    """Local SSIM at every position where the window fits entirely inside."""
    x, y = to_luma(a), to_luma(b)
    _check_same(x, y)
    n = params.window_size
    if x.shape[0] < n or x.shape[1] < n:
        raise ImageError(f"image {x.shape} smaller than the {n}x{n} SSIM window")
    w = params.window()
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    var_x = _filter_valid(x * x, w) - mu_x * mu_x
    var_y = _filter_valid(y * y, w) - mu_y * mu_y
    cov = _filter_valid(x * y, w) - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    return float(ssim_map(a, b, params).mean())


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: output i samples input coordinate (i + .5) * n_in / n_out - .5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    return lo, hi, t


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    img = as_image(img)
    if out_w < 1 or out_h < 1:
        raise ImageError("output dimensions must be >= 1")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    lo, hi, t = _axis_weights(h, out_h)
    t = t[:, None, None]
    rows = img[lo] * (1 - t) + img[hi] * t
    lo, hi, t = _axis_weights(w, out_w)
    t = t[None, :, None]
    return rows[:, lo] * (1 - t) + rows[:, hi] * t


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return as_image(np.array(im, dtype=np.float64))


def write_image(img, path: str | Path) -> None:
    """Write as 8-bit PNG; values are rounded and clipped to [0, 255]."""
    arr = np.clip(np.rint(as_image(img)), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG", compress_level=6)
