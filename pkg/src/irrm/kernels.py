"""Backend selection for the convolution unfold/fold kernels.

The compiled Cython module is preferred. Setting ``IRRM_PURE_PYTHON=1`` in the
environment, or a missing build, selects the numpy fallback. Both backends
produce bit-identical results.
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("IRRM_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Switch the active backend; returns the previous name."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    prev, BACKEND = BACKEND, name
    return prev


def im2col(xp, kh, kw, stride):
    return _BACKENDS[BACKEND].im2col(xp, kh, kw, stride)


def col2im(cols, shape, kh, kw, stride):
    return _BACKENDS[BACKEND].col2im(cols, shape, kh, kw, stride)


def active_backend():
    return BACKEND
