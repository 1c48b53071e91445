"""Dense tensors with reverse-mode differentiation.

Everything the network needs is built from the primitives in this module:
2D/1D convolution, pooling, dense layers, pointwise nonlinearities,
broadcasting arithmetic and dropout.  Each primitive records a closure that
maps the upstream gradient to gradients of its inputs, and
:meth:`Tensor.backward` replays those closures in reverse topological order.

Tensors hold ``float32`` data by default.  Gradient checks switch to
``float64`` through :func:`float64_mode`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 4

_default_dtype = np.float32
_grad_enabled = True
DEBUG = False


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def float64_mode():
    """Create new tensors as float64 inside the block."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Skip graph recording (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An immutable dense array of rank <= 4 that can take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if any(extent < 1 for extent in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        if DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values produced")
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


class Parameter(Tensor):
    """A named trainable tensor with a gradient buffer of the same shape."""

    __slots__ = ("name",)

    def __init__(self, value, name):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, value):
        """Replace the value in place (optimizer updates, checkpoint loads)."""
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.shape:
            raise ValueError(f"{self.name}: cannot assign shape {value.shape} to {self.shape}")
        value = value.copy()
        value.flags.writeable = False
        self.data = value

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data, parents, backward):
    parents = tuple(parents)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


elementwise_mul = mul


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, tensors, backward)


# -------------------------------------------------------------- nonlinearity


def sigmoid(a):
    a = as_tensor(a)
    # split by sign so large |x| never overflows exp
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def dropout_mask(shape, rate, seed, dtype=None):
    """Inverted-dropout mask: survivors carry ``1/(1-rate)``, the rest zero."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    dtype = np.dtype(dtype or _default_dtype)
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def dropout(a, rate, seed, training=True):
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    return mul(a, Tensor(dropout_mask(a.shape, rate, seed, a.dtype)))


# ------------------------------------------------------------------- layers


def _check_kernel(kh, kw):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")


def _im2col(xh, kh, kw, pad):
    """NHWC input -> (N*H'*W', kh*kw*C) patch matrix."""
    n, h, w, c = xh.shape
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=xh.dtype)
        xp[:, pad:pad + h, pad:pad + w] = xh
    else:
        xp = xh
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xh.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c), (ho, wo)


# below this many input channels the im2col matmul beats per-tap matmuls
_FLAT_MIN_CHANNELS = 16


def _conv_geometry(x_shape, weight_shape, padding):
    n, c, h, w = x_shape
    o, cw, kh, kw = weight_shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {x_shape} vs weight {weight_shape}")
    _check_kernel(kh, kw)
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    if padding == "same" and kh != kw:
        raise ValueError("same padding needs a square kernel")
    if padding == "valid" and (kh > h or kw > w):
        raise ValueError(f"kernel {weight_shape} does not fit input {x_shape}")
    pad = kh // 2 if padding == "same" else 0
    return pad, (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1)


def _flat_padded(x, pad):
    """NCHW -> zero-padded NHWC flattened to rows ``(N*Hp*Wp, C)``."""
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x.transpose(0, 2, 3, 1)
    return xp.reshape(-1, c), xp.shape


def _tap_offsets(kh, kw, wp, rows):
    """Row offset of every kernel tap and the number of rows all taps can read."""
    offs = [i * wp + j for i in range(kh) for j in range(kw)]
    return offs, rows - offs[-1]


def conv2d_forward(x, weight, bias=None, padding="same"):
    """Cross-correlation of ``x[N,C,H,W]`` with ``weight[O,C,kh,kw]`` (numpy arrays).

    Wide inputs use per-tap matmuls on the flattened padded image: output
    row ``r`` reads input rows ``r + i*Wp + j``, so every tap is a
    contiguous slice and no patch matrix is built.  Rows that wrap past
    the image edge are computed and cropped.
    """
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    pad, (ho, wo) = _conv_geometry(x.shape, weight.shape, padding)
    if kh == 1 and kw == 1:
        out = x.transpose(0, 2, 3, 1).reshape(-1, c) @ weight.reshape(o, c).T
        out = out.reshape(n, ho, wo, o)
    elif c < _FLAT_MIN_CHANNELS:
        cols, _ = _im2col(x.transpose(0, 2, 3, 1), kh, kw, pad)
        out = (cols @ weight.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)).reshape(n, ho, wo, o)
    else:
        xf, (_, hp, wp, _) = _flat_padded(x, pad)
        offs, rows = _tap_offsets(kh, kw, wp, xf.shape[0])
        taps = np.ascontiguousarray(weight.transpose(2, 3, 1, 0)).reshape(kh * kw, c, o)
        acc = np.zeros((xf.shape[0], o), dtype=x.dtype)
        tmp = np.empty((rows, o), dtype=x.dtype)
        for t, off in enumerate(offs):
            np.matmul(xf[off:off + rows], taps[t], out=tmp)
            acc[:rows] += tmp
        out = acc.reshape(n, hp, wp, o)[:, :ho, :wo]
    if bias is not None:
        out = out + bias
    return out.transpose(0, 3, 1, 2)


def conv2d_backward(grad_out, x, weight, padding="same", input_grad=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    ``input_grad=False`` skips the input gradient (returned as ``None``).
    """
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    pad, (ho, wo) = _conv_geometry(x.shape, weight.shape, padding)
    gb = grad_out.sum(axis=(0, 2, 3))
    if kh == 1 and kw == 1:
        gm = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
        xh = x.transpose(0, 2, 3, 1).reshape(-1, c)
        gw = (gm.T @ xh).reshape(o, c, 1, 1)
        gx = (gm @ weight.reshape(o, c)).reshape(n, h, w, c).transpose(0, 3, 1, 2) if input_grad else None
        return gx, gw, gb
    if c < _FLAT_MIN_CHANNELS:
        gm = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
        cols, _ = _im2col(x.transpose(0, 2, 3, 1), kh, kw, pad)
        gw = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        del cols
        if not input_grad:
            return None, gw, gb
        wm = weight.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
        gcols = (gm @ wm.T).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho, j:j + wo] += gcols[:, :, :, i, j]
        return gxp[:, pad:pad + h, pad:pad + w].transpose(0, 3, 1, 2), gw, gb
    xf, (_, hp, wp, _) = _flat_padded(x, pad)
    # output gradient on the padded grid; wrapped rows get zero
    gp = np.zeros((n, hp, wp, o), dtype=x.dtype)
    gp[:, :ho, :wo] = grad_out.transpose(0, 2, 3, 1)
    gf = gp.reshape(-1, o)
    offs, rows = _tap_offsets(kh, kw, wp, xf.shape[0])
    g_rows = gf[:rows]
    gw = np.empty((kh * kw, c, o), dtype=x.dtype)
    for t, off in enumerate(offs):
        np.matmul(xf[off:off + rows].T, g_rows, out=gw[t])
    gw = gw.reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
    if not input_grad:
        return None, gw, gb
    taps_t = np.ascontiguousarray(weight.transpose(2, 3, 0, 1)).reshape(kh * kw, o, c)
    gxf = np.zeros_like(xf)
    tmp = np.empty((rows, c), dtype=x.dtype)
    for t, off in enumerate(offs):
        np.matmul(g_rows, taps_t[t], out=tmp)
        gxf[off:off + rows] += tmp
    gx = gxf.reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + w].transpose(0, 3, 1, 2)
    return gx, gw, gb


def conv2d(x, weight, bias=None, padding="same"):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
        parents.append(bias)
    out = conv2d_forward(x.data, weight.data, None if bias is None else bias.data, padding)

    def backward(g):
        gx, gw, gb = conv2d_backward(g, x.data, weight.data, padding, input_grad=x.requires_grad)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out, parents, backward)


def conv1d(x, weight):
    """Zero-padded 'same' correlation of ``x[N,C]`` with ``weight[k]`` along C."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 1:
        raise ValueError(f"conv1d expects [N,C] input and [k] weight, got {x.shape} and {weight.shape}")
    k = weight.shape[0]
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel length must be odd, got {k}")
    half = k // 2
    n, c = x.shape
    xp = np.zeros((n, c + 2 * half), dtype=x.dtype)
    xp[:, half:half + c] = x.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += weight.data[j] * xp[:, j:j + c]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for j in range(k):
            gxp[:, j:j + c] += weight.data[j] * g
            gw[j] = np.sum(g * xp[:, j:j + c])
        return gxp[:, half:half + c], gw

    return _make(out, (x, weight), backward)


def avg_pool2d(x, window=2):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"avg_pool2d: extents {h}x{w} not divisible by window {window}")
    out = x.data.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))

    def backward(g):
        g = g / (window * window)
        return (np.repeat(np.repeat(g, window, axis=2), window, axis=3),)

    return _make(out, (x,), backward)


def global_avg_pool(x):
    """``[N,C,H,W] -> [N,C]`` spatial mean."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _make(out, (x,), backward)


def dense(x, weight, bias=None):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"dense bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return _make(out, parents, backward)


def mse(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int = 0
    message: str = ""

    @property
    def pass_(self):
        return self.passed

    def __bool__(self):
        return self.passed


def _scalarize(out, seed=0):
    """Project a non-scalar output onto fixed random weights."""
    if out.size == 1:
        return reshape(out, ())
    proj = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return sum_(mul(out, Tensor(proj)))


def grad_check(op_under_test: Callable[..., Tensor], inputs: Sequence, step=1e-5, tolerance=1e-4,
               max_elements=None, seed=0, analytic=None):
    """Compare analytic gradients with central finite differences.

    ``op_under_test`` maps tensors to a tensor; non-scalar outputs are
    reduced with a seeded random projection.  ``inputs`` are arrays (or
    Parameters) to differentiate against.  ``max_elements`` samples that
    many coordinates per input instead of checking all of them.
    ``analytic`` can override the backward pass (used to inject faults).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    arrays = [np.array(getattr(x, "data", x), dtype=np.float64) for x in inputs]
    with float64_mode(), np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            def evaluate(values, track):
                leaves = [Tensor(v, requires_grad=track) for v in values]
                out = _scalarize(as_tensor(op_under_test(*leaves)), seed)
                return leaves, out

            if analytic is None:
                leaves, out = evaluate(arrays, True)
                if not np.isfinite(out.data).all():
                    return GradCheckReport(math.inf, False, 0, "non-finite output")
                out.backward()
                grads = [np.zeros_like(a) if leaf.grad is None else leaf.grad for a, leaf in zip(arrays, leaves)]
            else:
                grads = [np.asarray(g, dtype=np.float64) for g in analytic(*arrays)]

            rng = np.random.default_rng(seed)
            worst, count = 0.0, 0
            for a, g in zip(arrays, grads):
                idx = np.arange(a.size)
                if max_elements is not None and a.size > max_elements:
                    idx = rng.choice(a.size, size=max_elements, replace=False)
                flat = a.reshape(-1)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = float(evaluate(arrays, False)[1].data)
                    flat[i] = orig - step
                    fm = float(evaluate(arrays, False)[1].data)
                    flat[i] = orig
                    numeric = (fp - fm) / (2 * step)
                    exact = float(g.reshape(-1)[i])
                    if not (math.isfinite(numeric) and math.isfinite(exact)):
                        return GradCheckReport(math.inf, False, count, "non-finite gradient")
                    rel = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8)
                    worst = max(worst, rel)
                    count += 1
        except FloatingPointError as exc:
            return GradCheckReport(math.inf, False, 0, f"floating point error: {exc}")
    return GradCheckReport(worst, worst < tolerance, count)
