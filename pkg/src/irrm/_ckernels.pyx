# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels.

Layout: inputs are padded channels-last arrays (N, H, W, C); columns are
pixel-major (N, OH*OW, kh*kw*C) with taps ordered (ki, kj, c).

Both functions must stay bit-identical to the numpy versions in
``_pykernels``: col2im accumulates kernel taps in (ki, kj) row-major order.
"""
import numpy as np

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] xp, real[:, :, ::1] cols,
            int kh, int kw, int stride, int oh, int ow):
    cdef Py_ssize_t n, i, y, x, t
    cdef Py_ssize_t N = xp.shape[0], W = xp.shape[2], C = xp.shape[3]
    cdef Py_ssize_t run = kw * C
    cdef const real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            dst = &cols[n, 0, 0]
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        src = &xp[n, y * stride + i, x * stride, 0]
                        for t in range(run):
                            dst[t] = src[t]
                        dst += run


def _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int stride, int oh, int ow):
    cdef Py_ssize_t n, i, j, y, x, c
    cdef Py_ssize_t N = out.shape[0], C = out.shape[3], K = cols.shape[2]
    cdef real* dst
    cdef const real* src
    with nogil:
        for n in range(N):
            for i in range(kh):
                for j in range(kw):
                    for y in range(oh):
                        for x in range(ow):
                            dst = &out[n, y * stride + i, x * stride + j, 0]
                            src = &cols[n, y * ow + x, (i * kw + j) * C]
                            for c in range(C):
                                dst[c] += src[c]


def im2col(xp, int kh, int kw, int stride):
    """Unfold a padded (N, H, W, C) array into (N, OH*OW, kh*kw*C) columns."""
    xp = np.ascontiguousarray(xp)
    cdef int oh = (xp.shape[1] - kh) // stride + 1
    cdef int ow = (xp.shape[2] - kw) // stride + 1
    cols = np.empty((xp.shape[0], oh * ow, kh * kw * xp.shape[3]), dtype=xp.dtype)
    if xp.dtype == np.float32 or xp.dtype == np.float64:
        _im2col(xp, cols, kh, kw, stride, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {xp.dtype}")
    return cols


def col2im(cols, shape, int kh, int kw, int stride):
    """Fold (N, OH*OW, kh*kw*C) columns into a zero-initialised (N, H, W, C) array."""
    cols = np.ascontiguousarray(cols)
    cdef int oh = (shape[1] - kh) // stride + 1
    cdef int ow = (shape[2] - kw) // stride + 1
    out = np.zeros(shape, dtype=cols.dtype)
    if cols.dtype == np.float32 or cols.dtype == np.float64:
        _col2im(cols, out, kh, kw, stride, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
