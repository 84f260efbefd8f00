"""Orthonormal 2-D Haar transform and the residual low/high decomposition.

The residual split keeps the 2x2 block mean of the image as a bypassed base
(``avg_pool2``) and hands the detail bands of ``x - nearest_up2(base)`` to the
learned blocks. Because subtracting the replicated block mean annihilates the
LL band, the pair ``(base, high)`` is an exact re-parameterisation of ``x``.
"""
from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class WaveletBands:
    """One level of Haar bands.

    ``high`` stacks the LH, HL and HH bands in that order, each block holding
    all ``C`` input channels.
    """

    low: Tensor
    high: Tensor


def haar_forward(x: Tensor) -> WaveletBands:
    y = T.haar2d(x)
    c = x.shape[1]
    return WaveletBands(T.narrow(y, 0, c), T.narrow(y, c, 3 * c))


def haar_inverse(bands: WaveletBands) -> Tensor:
    low, high = bands.low, bands.high
    if high.shape[1] != 3 * low.shape[1]:
        raise ValueError(f"haar_inverse: high band has {high.shape[1]} channels, expected 3 x {low.shape[1]}")
    if high.shape[0] != low.shape[0] or high.shape[2:] != low.shape[2:]:
        raise ValueError(f"haar_inverse: band shapes {low.shape} and {high.shape} disagree")
    return T.ihaar2d(T.cat([low, high]))


def residual_decompose(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split ``x`` into (avg-pooled base, detail bands of the residual)."""
    base = T.avg_pool2(x)
    residual = x - T.nearest_up2(base)
    return base, haar_forward(residual).high


def residual_recompose(base: Tensor, high: Tensor) -> Tensor:
    """Inverse of :func:`residual_decompose`."""
    if base.data.ndim != 4 or high.data.ndim != 4:
        raise ValueError(f"residual_recompose: expected 4-D tensors, got {base.shape} and {high.shape}")
    n, c, h, w = base.shape
    if high.shape != (n, 3 * c, h, w):
        raise ValueError(f"residual_recompose: base shape {base.shape} inconsistent with high shape {high.shape}")
    residual = haar_inverse(WaveletBands(T.zeros(base.shape, dtype=base.dtype), high))
    return residual + T.nearest_up2(base)
