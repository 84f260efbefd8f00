"""Luma conversion, bicubic resampling, PSNR and SSIM.

Everything here runs in float64 regardless of model precision.
"""
import math
from fractions import Fraction

import numpy as np
from scipy.ndimage import correlate1d

from .imageio import ImageU8
from .tensor import Tensor

SUPPORTED_SCALES = (Fraction(1, 4), Fraction(1, 2), Fraction(2), Fraction(4))

# PSNR of identical inputs; a float so it sorts and averages sensibly, but never finite
IDENTICAL = math.inf


def _as_nchw(x):
    """Tensor / ndarray / ImageU8 -> float64 (n, c, h, w), values on a [0, 1] scale."""
    if isinstance(x, ImageU8):
        return (x.pixels.transpose(2, 0, 1)[None] / 255.0).astype(np.float64)
    arr = x.numpy() if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
        if arr.ndim == 3 and arr.shape[2] == 3:
            arr = arr.transpose(2, 0, 1)
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected image data of rank 2-4, got shape {arr.shape}")
    return arr


def to_luma(img) -> Tensor:
    """BT.601 studio-range luma: (n, 1, h, w) in [16, 235] from RGB in [0, 1]."""
    x = _as_nchw(img)
    if x.shape[1] != 3:
        raise ValueError(f"to_luma needs 3 channels, got {x.shape[1]}")
    y = 65.481 * x[:, 0:1] + 128.553 * x[:, 1:2] + 24.966 * x[:, 2:3] + 16.0
    return Tensor(y, dtype=np.float64)


def _luma_255(img):
    x = _as_nchw(img)
    if x.shape[1] == 3:
        return to_luma(x).numpy()
    if x.shape[1] == 1:
        return x * 255.0
    raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")


# -- bicubic ---------------------------------------------------------------------


def cubic(t, a=-0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_weights(n_in, scale):
    """(n_out, n_in) interpolation matrix along one axis, pixel-centre aligned.

    Downscaling widens the kernel by 1/scale (antialiasing). Out-of-range taps
    are clamped to the border sample.
    """
    scale = Fraction(scale)
    n_out = n_in * scale
    if n_out.denominator != 1:
        raise ValueError(f"size {n_in} is not divisible for scale {scale}")
    n_out = int(n_out)
    s = float(scale)
    stretch = min(s, 1.0)
    radius = 2.0 / stretch
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) / s - 0.5
        lo = math.floor(centre - radius) + 1
        taps = np.arange(lo, lo + int(math.ceil(2 * radius)) + 1)
        k = cubic((centre - taps) * stretch)
        k /= k.sum()
        np.add.at(w[i], np.clip(taps, 0, n_in - 1), k)
    return w


def bicubic_resize(x, scale):
    """Resize the spatial axes of an (n, c, h, w) tensor or array by ``scale``.

    Returns the same container type as the input (Tensor in, Tensor out).
    """
    scale = Fraction(scale).limit_denominator(8)
    if scale not in SUPPORTED_SCALES:
        raise ValueError(f"unsupported scale {scale}; expected one of 1/4, 1/2, 2, 4")
    is_tensor = isinstance(x, Tensor)
    arr = x.numpy() if is_tensor else np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"bicubic_resize expects (n, c, h, w), got {arr.shape}")
    wh = resize_weights(arr.shape[2], scale)
    ww = resize_weights(arr.shape[3], scale)
    out = np.einsum("ih,nchw,jw->ncij", wh, arr.astype(np.float64), ww, optimize=True)
    if is_tensor:
        return Tensor(out, dtype=x.dtype)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


# -- quality metrics ---------------------------------------------------------------


def _crop(a, border):
    if border < 0:
        raise ValueError(f"crop_border must be >= 0, got {border}")
    if border == 0:
        return a
    if 2 * border >= min(a.shape[-2:]):
        raise ValueError(f"crop_border {border} leaves nothing of a {a.shape[-2]}x{a.shape[-1]} image")
    return a[..., border:-border, border:-border]


def _pair(a, b, crop_border):
    ya, yb = _luma_255(a), _luma_255(b)
    if ya.shape != yb.shape:
        raise ValueError(f"image dimensions differ: {ya.shape} vs {yb.shape}")
    return _crop(ya, crop_border), _crop(yb, crop_border)


def psnr(a, b, crop_border=None, scale=None):
    """Luma PSNR in dB with peak 255.

    ``crop_border`` defaults to ``scale`` (or 0 when neither is given).
    Identical inputs return :data:`IDENTICAL` (infinity).
    """
    if crop_border is None:
        crop_border = int(scale) if scale else 0
    ya, yb = _pair(a, b, crop_border)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(255.0 ** 2 / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, then keep only fully covered positions
    h = correlate1d(correlate1d(img, g, axis=-1, mode="constant"), g, axis=-2, mode="constant")
    r = len(g) // 2
    return h[..., r:h.shape[-2] - r, r:h.shape[-1] - r]


def ssim_map(ya, yb, data_range=255.0):
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    saa = _filter_valid(ya * ya, g) - mu_a * mu_a
    sbb = _filter_valid(yb * yb, g) - mu_b * mu_b
    sab = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, crop_border=None, scale=None):
    """Mean luma SSIM (11x11 Gaussian window, sigma 1.5, range 255)."""
    if crop_border is None:
        crop_border = int(scale) if scale else 0
    ya, yb = _pair(a, b, crop_border)
    if min(ya.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {ya.shape[-2]}x{ya.shape[-1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(ya, yb):
        return 1.0
    return float(np.mean(ssim_map(ya, yb)))
