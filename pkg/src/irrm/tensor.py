"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a read-only numpy array. Every operation returns a new
tensor; when gradient recording is enabled and any input requires a gradient,
the output remembers its parents and a backward rule. :meth:`Tensor.backward`
walks that graph once in reverse topological order and accumulates gradients
into leaf tensors.

Broadcasting is deliberately limited to tensor-scalar operations: binary ops on
two tensors require identical shapes and dtypes.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels

_grad_enabled = True
_default_dtype = np.dtype(np.float32)


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"only float32/float64 are supported, got {dtype}")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences, optimizer updates)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _frozen(arr):
    arr.flags.writeable = False
    return arr


class Tensor:
    """An immutable array value, optionally tracked for gradients.

    New tensors take the current default dtype (see :func:`precision`) unless
    ``dtype`` is given explicitly.
    """

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _frozen(np.array(data, dtype=dtype or _default_dtype, copy=True))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(parents[0].dtype if parents else _default_dtype)
        out.data = _frozen(data)
        out.grad = None
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        """Return a writable copy of the data."""
        return np.array(self.data)

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype):
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

    # -- differentiation ------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without an explicit grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise RuntimeError(f"operation '{node._op}' is not differentiable")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None, requires_grad=False):
    dtype = dtype or _default_dtype
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def ones(shape, dtype=None, requires_grad=False):
    dtype = dtype or _default_dtype
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def _is_scalar(v):
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def _check_pair(name, a, b):
    if not isinstance(b, Tensor):
        raise TypeError(f"{name}: unsupported operand {type(b).__name__}")
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")
    if a.dtype != b.dtype:
        raise TypeError(f"{name}: dtype mismatch {a.dtype} vs {b.dtype}")


# -- elementwise ----------------------------------------------------------------


def add(a, b):
    if _is_scalar(b):
        return Tensor._result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    _check_pair("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if _is_scalar(b):
        return Tensor._result(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    _check_pair("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    if _is_scalar(b):
        return Tensor._result(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b, strict=True):
    """``a / b``. In strict mode a divisor tensor containing zeros is an error."""
    if _is_scalar(b):
        if b == 0:
            raise ZeroDivisionError("div: division by scalar zero")
        return Tensor._result(a.data / b, (a,), lambda g: (g / b,), "div_scalar")
    _check_pair("div", a, b)
    ad, bd = a.data, b.data
    if strict and not np.all(bd != 0):
        raise ZeroDivisionError(f"div: divisor contains {int(np.sum(bd == 0))} zero entries")
    out = ad / bd
    return Tensor._result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def reciprocal(a, strict=True):
    ad = a.data
    if strict and not np.all(ad != 0):
        raise ZeroDivisionError("reciprocal: input contains zero entries")
    out = 1.0 / ad
    return Tensor._result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a):
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a):
    # split by sign so large |x| never overflows exp
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def leaky_relu(a, slope=0.2):
    x = a.data
    out = np.maximum(x, x * slope) if 0 <= slope <= 1 else np.where(x > 0, x, x * slope)

    def backward(g):
        return (np.where(x > 0, g, g * slope),)

    return Tensor._result(out, (a,), backward, "leaky_relu")


def abs(a):  # noqa: A001 - mirrors numpy naming
    x = a.data
    return Tensor._result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def square(a):
    x = a.data
    return Tensor._result(x * x, (a,), lambda g: (2 * g * x,), "square")


def quantize(a, levels=255):
    """Round to a uniform grid of ``levels`` steps on [0, 1]. Not differentiable."""
    out = np.clip(np.round(a.data * levels), 0, levels) / levels
    return Tensor._result(out.astype(a.dtype), (a,), None, "quantize")


# -- reductions -----------------------------------------------------------------

_SCALAR_SHAPE = (1, 1, 1, 1)


def sum(a):  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, dtype=a.dtype).reshape(_SCALAR_SHAPE)
    return Tensor._result(out, (a,), lambda g: (np.full(shape, g.reshape(()), dtype=g.dtype),), "sum")


def mean(a):
    shape, n = a.shape, a.size
    out = (np.sum(a.data, dtype=a.dtype) / n).reshape(_SCALAR_SHAPE).astype(a.dtype)
    return Tensor._result(out, (a,), lambda g: (np.full(shape, g.reshape(()) / n, dtype=g.dtype),), "mean")


# -- structural -----------------------------------------------------------------


def cat(tensors, axis=1):
    tensors = list(tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != axis)
        mine = tuple(s for i, s in enumerate(ref.shape) if i != axis)
        if other != mine or t.dtype != ref.dtype:
            raise ValueError(f"cat: incompatible shapes {ref.shape} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "cat")


def narrow(a, start, length, axis=1):
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow: [{start}, {start + length}) out of range for axis of size {a.shape[axis]}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return Tensor._result(np.array(a.data[idx]), (a,), backward, "narrow")


def split(a, sizes, axis=1):
    out, start = [], 0
    for s in sizes:
        out.append(narrow(a, start, s, axis))
        start += s
    if start != a.shape[axis]:
        raise ValueError(f"split: sizes {sizes} do not cover axis of size {a.shape[axis]}")
    return out


# -- spatial --------------------------------------------------------------------


def _check_even(name, a):
    if a.data.ndim != 4:
        raise ValueError(f"{name}: expected a 4-D (n, c, h, w) tensor, got shape {a.shape}")
    h, w = a.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"{name}: spatial size {h}x{w} is odd; pad the input to even height and width")


def avg_pool2(a):
    """Non-overlapping 2x2 mean pooling."""
    _check_even("avg_pool2", a)
    n, c, h, w = a.shape
    x = a.data.reshape(n, c, h // 2, 2, w // 2, 2)
    # fixed summation order: (0,0) + (0,1) + (1,0) + (1,1)
    out = ((x[:, :, :, 0, :, 0] + x[:, :, :, 0, :, 1]) + (x[:, :, :, 1, :, 0] + x[:, :, :, 1, :, 1])) * 0.25

    def backward(g):
        q = g * 0.25
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return Tensor._result(out, (a,), backward, "avg_pool2")


def nearest_up2(a):
    """Replicate every pixel into a 2x2 block."""
    if a.data.ndim != 4:
        raise ValueError(f"nearest_up2: expected a 4-D tensor, got shape {a.shape}")
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g):
        b = g.reshape(n, c, h, 2, w, 2)
        return ((b[:, :, :, 0, :, 0] + b[:, :, :, 0, :, 1]) + (b[:, :, :, 1, :, 0] + b[:, :, :, 1, :, 1]),)

    return Tensor._result(out, (a,), backward, "nearest_up2")


def _haar_analysis(x):
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    ll = ((a + b) + (c + d)) * 0.5
    lh = ((a - b) + (c - d)) * 0.5
    hl = ((a + b) - (c + d)) * 0.5
    hh = ((a - b) - (c - d)) * 0.5
    return np.concatenate([ll, lh, hl, hh], axis=1)


def _haar_synthesis(y):
    c = y.shape[1] // 4
    ll, lh, hl, hh = y[:, :c], y[:, c:2 * c], y[:, 2 * c:3 * c], y[:, 3 * c:]
    n, _, h, w = y.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=y.dtype)
    out[:, :, 0::2, 0::2] = ((ll + lh) + (hl + hh)) * 0.5
    out[:, :, 0::2, 1::2] = ((ll - lh) + (hl - hh)) * 0.5
    out[:, :, 1::2, 0::2] = ((ll + lh) - (hl + hh)) * 0.5
    out[:, :, 1::2, 1::2] = ((ll - lh) - (hl - hh)) * 0.5
    return out


def haar2d(a):
    """Orthonormal Haar analysis: (n, C, h, w) -> (n, 4C, h/2, w/2) laid out [LL, LH, HL, HH]."""
    _check_even("haar2d", a)
    # orthonormal: the adjoint is the inverse
    return Tensor._result(_haar_analysis(a.data), (a,), lambda g: (_haar_synthesis(g),), "haar2d")


def ihaar2d(a):
    """Inverse of :func:`haar2d`."""
    if a.data.ndim != 4 or a.shape[1] % 4:
        raise ValueError(f"ihaar2d: channel count must be a multiple of 4, got shape {a.shape}")
    return Tensor._result(_haar_synthesis(a.data), (a,), lambda g: (_haar_analysis(g),), "ihaar2d")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding, (N, C, H, W) * (O, C, kh, kw) -> (N, O, OH, OW)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input shape {x.shape} has {c} channels but weight shape {weight.shape} expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size {kh}x{kw} must be odd")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    if x.dtype != weight.dtype or (bias is not None and bias.dtype != x.dtype):
        raise TypeError("conv2d: input, weight and bias must share a dtype")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: input shape {x.shape} too small for weight shape {weight.shape}")

    # channels-last padded copy; columns are (pixel, tap) with taps ordered (ki, kj, c)
    if padding:
        xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w, :] = x.data.transpose(0, 2, 3, 1)
    else:
        xp = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and stride == 1
    if pointwise:
        cols = xp.reshape(n * oh * ow, c)
    else:
        cols = kernels.im2col(xp, kh, kw, stride).reshape(n * oh * ow, kh * kw * c)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if pointwise:
                dxp = dcols.reshape(xp.shape)
            else:
                dxp = kernels.col2im(dcols.reshape(n, oh * ow, kh * kw * c), xp.shape, kh, kw, stride)
            gx = np.ascontiguousarray(dxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, c, o)
            gw = np.ascontiguousarray(gw.transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._result(out, parents, backward, "conv2d")
