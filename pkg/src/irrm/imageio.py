"""8-bit RGB PNG files and conversions to/from [0, 1] tensors."""
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor


class ImageError(OSError):
    """Unreadable, malformed or unsupported image file."""


@dataclass(frozen=True)
class ImageU8:
    """Height x width x 3 array of 8-bit sRGB samples."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"ImageU8 needs a uint8 (h, w, 3) array, got {p.dtype} {p.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def load_png(path) -> ImageU8:
    """Read a PNG; grayscale is replicated to three channels, alpha is dropped."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageError(f"{path}: not a PNG file (format {im.format})")
            if im.mode in ("I;16", "I;16B", "I"):
                # 16-bit grayscale: keep the top byte
                arr = (np.asarray(im, dtype=np.uint32) >> 8).astype(np.uint8)
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            elif im.mode == "L":
                arr = np.repeat(np.asarray(im)[:, :, None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        if isinstance(exc, ImageError):
            raise
        raise ImageError(f"{path}: cannot read PNG ({exc})") from exc
    return ImageU8(np.ascontiguousarray(arr, dtype=np.uint8))


def save_png(img: ImageU8, path):
    """Write losslessly; goes through a temporary file so no partial output remains."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(img.pixels, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise ImageError(f"{path}: cannot write PNG ({exc})") from exc


def image_to_array(img: ImageU8) -> np.ndarray:
    """(3, h, w) float64 in [0, 1]."""
    return img.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def image_to_tensor(img: ImageU8, dtype=None) -> Tensor:
    return Tensor(image_to_array(img)[None], dtype=dtype)


def array_to_image(arr) -> ImageU8:
    """Round a (3, h, w) or (1, 3, h, w) [0, 1] array to 8 bits."""
    arr = np.asarray(arr.numpy() if isinstance(arr, Tensor) else arr, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) data, got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return ImageU8(np.ascontiguousarray(q.transpose(1, 2, 0)))


tensor_to_image = array_to_image


def list_pngs(directory):
    """Sorted PNG paths in ``directory`` (non-recursive)."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    return [os.path.join(directory, n) for n in names]
