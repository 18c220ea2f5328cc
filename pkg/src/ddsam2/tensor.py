"""Dense float64 tensors with a tape-based reverse-mode gradient.

Every op is a plain function that computes its forward value with numpy and,
when a :class:`Tape` is active and some input requires a gradient, records a
node holding the backward rule. ``Tape.backward`` walks the nodes in reverse.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError, UsageError

DTYPE = np.float64
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def dims(self):
        return self.data.shape

    shape = dims

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of dims {self.dims}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    A tape belongs to the thread that entered it; do not share one across
    threads.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def backward(self, loss, seed=None):
        if seed is None:
            if loss.size != 1:
                raise UsageError(f"backward from non-scalar tensor of dims {loss.dims}")
            seed = np.ones_like(loss.data)
        loss.grad = np.asarray(seed, dtype=DTYPE) if loss.grad is None else loss.grad + seed
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, backward):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.nodes.append(_Node(inputs, out, backward))
        return out
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _emit(out, (a, b), backward)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _emit(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def sigmoid(x):
    xd = x.data
    # tanh form avoids overflow for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _emit(out, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * xd)),))


# ---------------------------------------------------------------- reductions


def sum_all(x):
    shape = x.data.shape
    return _emit(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    shape, n = x.data.shape, x.data.size
    return _emit(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),))


def sum_axis(x, axis, keepdims=False):
    shape = x.data.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------- structure


def reshape(x, shape):
    old = x.data.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis):
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(x, index, axis):
    """Slice ``index`` (an int or slice) along ``axis``; int indices drop the axis."""
    shape = x.data.shape
    sl = [slice(None)] * x.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[sl] = g
        return (full,)

    return _emit(x.data[sl], (x,), backward)


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape[-1]} vs {bd.shape[-2]}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- layers


def conv2d_pointwise(x, w, b=None):
    """1x1 convolution: ``out[n,o,h,w] = b[o] + sum_c w[o,c] x[n,c,h,w]``."""
    xd, wd = x.data, w.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d_pointwise expects rank-4 input, got dims {xd.shape}")
    n, cin, h, wid = xd.shape
    if wd.ndim != 2 or wd.shape[1] != cin:
        raise ShapeError(f"conv2d_pointwise weight in-channels {wd.shape[-1]} != input channels {cin}")
    cout = wd.shape[0]
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d_pointwise bias length {b.data.shape} != out channels {cout}")
    flat = xd.reshape(n, cin, h * wid)
    out = wd @ flat
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(n, cout, h, wid)

    def backward(g):
        gf = g.reshape(n, cout, h * wid)
        gx = (wd.T @ gf).reshape(xd.shape)
        gw = np.einsum("nop,ncp->oc", gf, flat)
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, backward)


def conv2d_depthwise(x, w, b=None, dilation=1):
    """Per-channel k x k convolution with taps spaced ``dilation`` apart.

    Zero padding of ``dilation * (k - 1) / 2`` on every side keeps H and W.
    """
    xd, wd = x.data, w.data
    if wd.ndim != 3 or wd.shape[1] != wd.shape[2]:
        raise ShapeError(f"depthwise kernel must be [C,k,k], got {wd.shape}")
    k = wd.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    if int(dilation) != dilation or dilation < 1:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    if xd.ndim != 4:
        raise ShapeError(f"conv2d_depthwise expects rank-4 input, got dims {xd.shape}")
    n, c, h, wid = xd.shape
    if wd.shape[0] != c:
        raise ShapeError(f"depthwise kernel channels {wd.shape[0]} != input channels {c}")
    if b is not None and b.data.shape != (c,):
        raise ShapeError(f"depthwise bias length {b.data.shape} != channels {c}")
    r = int(dilation)
    pad = r * (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(xd) if b is None else np.broadcast_to(b.data[None, :, None, None], xd.shape).copy()
    for i in range(k):
        for j in range(k):
            out += wd[None, :, i, j, None, None] * xp[:, :, i * r:i * r + h, j * r:j * r + wid]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(k):
            for j in range(k):
                win = (slice(None), slice(None), slice(i * r, i * r + h), slice(j * r, j * r + wid))
                gxp[win] += wd[None, :, i, j, None, None] * g
                gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[win])
        gx = gxp[:, :, pad:pad + h, pad:pad + wid]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, backward)


def linear(x, w, b=None):
    """Affine map over the last axis: ``x @ w.T + b``."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear weight expects din={wd.shape[-1]}, input has din={xd.shape[-1]}")
    dout, din = wd.shape
    out = xd @ wd.T
    if b is not None:
        if b.data.shape != (dout,):
            raise ShapeError(f"linear bias length {b.data.shape} != dout {dout}")
        out = out + b.data

    def backward(g):
        gx = g @ wd
        gw = g.reshape(-1, dout).T @ xd.reshape(-1, din)
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, dout).sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, backward)


def attention(q, k, v):
    """Scaled dot-product attention over the last two axes, row-wise softmax."""
    qd, kd, vd = q.data, k.data, v.data
    d = qd.shape[-1]
    if d == 0:
        raise ConfigError("attention with zero feature width")
    if kd.shape[-1] != d:
        raise ShapeError(f"attention query width {d} != key width {kd.shape[-1]}")
    if kd.shape[-2] != vd.shape[-2]:
        raise ShapeError(f"attention key count {kd.shape[-2]} != value count {vd.shape[-2]}")
    scale = 1.0 / math.sqrt(d)
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return (_unbroadcast(gq, qd.shape), _unbroadcast(gk, kd.shape),
                _unbroadcast(gv, vd.shape))

    return _emit(out, (q, k, v), backward)


LN_EPS = 1e-5


def layer_norm(x, gain, shift):
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have length {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, np.sum(flat_g * xhat.reshape(-1, d), axis=0), flat_g.sum(axis=0)

    return _emit(out, (x, gain, shift), backward)


def bilinear_matrix(n_in, n_out):
    """Row-stochastic [n_out, n_in] interpolation matrix, align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


_resize_cache = {}


def _cached_matrix(n_in, n_out):
    key = (n_in, n_out)
    m = _resize_cache.get(key)
    if m is None:
        m = _resize_cache[key] = bilinear_matrix(n_in, n_out)
        m.setflags(write=False)
    return m


def resize_bilinear(x, out_h, out_w):
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {out_h}x{out_w}")
    xd = x.data
    h, w = xd.shape[-2:]
    ry = _cached_matrix(h, out_h)
    rx = _cached_matrix(w, out_w)
    out = ry @ xd @ rx.T
    return _emit(out, (x,), lambda g: (ry.T @ g @ rx,))


# ---------------------------------------------------------------- checking


def grad_check(f, x, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``x`` is one tensor or a sequence of tensors; every coordinate of every
    tensor is perturbed. ``f`` maps them to a scalar tensor.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            y = f(*xs) if not isinstance(x, Tensor) else f(x)
        if y.size != 1:
            raise UsageError(f"grad_check needs a scalar function, got dims {y.dims}")
        tape.backward(y)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f, x, xs)
                flat[i] = orig - h
                fm = _scalar(f, x, xs)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, abs(gflat[i] - num) / (abs(num) + 1e-8))
        return worst
    finally:
        for t, flag in zip(xs, saved):
            t.requires_grad = flag
            t.grad = None


def _scalar(f, x, xs):
    y = f(*xs) if not isinstance(x, Tensor) else f(x)
    return float(np.asarray(y.data).reshape(-1)[0])
