"""Pure-numpy im2col / col2im, used when the compiled extension is absent.

Same layout contract as the compiled kernels: padded channels-last input
(N, H, W, C), pixel-major columns (N, OH*OW, kh*kw*C) with (ki, kj, c) taps.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1:3]
    # (N, OH, OW, C, kh, kw) -> (N, OH, OW, kh, kw, C)
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(cols).reshape(n, oh * ow, kh * kw * c)


def col2im(cols, shape, kh, kw, stride):
    n, hp, wp, c = shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros(shape, dtype=cols.dtype)
    blocks = cols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += blocks[:, :, :, i, j, :]
    return out
