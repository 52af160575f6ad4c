"""Reverse-mode automatic differentiation over dense numpy arrays.

Only what the 3D cGAN needs is here: elementwise arithmetic on equal shapes,
reductions to scalars, channel concatenation/slicing, 3D convolution and
its transpose (kernel 4), instance/batch normalisation, activations and a
logit-space binary cross-entropy.

Every op returns a new :class:`Tensor` whose ``_backward`` closure maps the
output gradient to a tuple of parent gradients. :meth:`Tensor.backward`
walks the graph once in reverse topological order and accumulates into the
``grad`` of leaves only, so calling it twice doubles leaf gradients.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

KERNEL = 4
NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, name=None, dtype=None):
        self.values = np.asarray(values, dtype=dtype)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self):
        if self.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def _topological(root):
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


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(values, parents, backward):
    out = Tensor(values)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.values + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return _make(a + b.values, (b,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return _make(a.values - b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return _make(a - b.values, (b,), lambda g: (-g,))
    _check_same(a, b, "sub")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        return _make(a.values * b, (a,), lambda g: (g * b,))
    _check_same(a, b, "mul")
    return _make(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


def square(x):
    return _make(x.values * x.values, (x,), lambda g: (2.0 * g * x.values,))


def absolute(x):
    """|x| with subgradient 0 at x == 0."""
    return _make(np.abs(x.values), (x,), lambda g: (g * np.sign(x.values),))


def sqrt(x):
    """Square root with gradient defined as 0 where x == 0."""
    y = np.sqrt(x.values)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / y, 0.0)
        return (g * d,)
    return _make(y, (x,), backward)


def sum(x):  # noqa: A001 - mirrors numpy naming
    return _make(x.values.sum(), (x,), lambda g: (np.full_like(x.values, g),))


def mean(x):
    n = x.values.size
    return _make(x.values.mean(), (x,), lambda g: (np.full_like(x.values, g / n),))


# -- activations --------------------------------------------------------------

def relu(x):
    mask = x.values > 0
    return _make(x.values * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    factor = np.where(x.values > 0, 1.0, slope).astype(x.dtype)
    return _make(x.values * factor, (x,), lambda g: (g * factor,))


def _sigmoid(v):
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    y = _sigmoid(x.values)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.values)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


# -- structure ----------------------------------------------------------------

def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    values = np.concatenate([t.values for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _make(values, tensors, backward)


def channel(x, c):
    """Slice channel ``c`` keeping the channel axis: (N, C, ...) -> (N, 1, ...)."""
    def backward(g):
        full = np.zeros_like(x.values)
        full[:, c:c + 1] = g
        return (full,)
    return _make(x.values[:, c:c + 1].copy(), (x,), backward)


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits, target):
    """Mean sigmoid cross-entropy against a constant target in {0, 1},
    evaluated in log space: max(x, 0) - x*t + log(1 + exp(-|x|))."""
    x = logits.values
    per = np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return (g * (_sigmoid(x) - target) / n,)
    return _make(per.mean(), (logits,), backward)


# -- convolution ----------------------------------------------------------------

@dataclass
class ConvParams:
    """Kernel-4 3D convolution parameters.

    For ``conv3d`` the weight is (out_ch, in_ch, 4, 4, 4). ``tconv3d`` uses
    the same array as the adjoint map, so it reads the weight as
    (in_ch, out_ch, 4, 4, 4) and the bias has length ``weight.shape[1]``.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 2
    padding: int = 1
    transposed: bool = False

    def __post_init__(self):
        if self.weight.shape[2:] != (KERNEL,) * 3:
            raise ShapeError(f"kernel must be 4x4x4, got {self.weight.shape[2:]}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        nb = self.weight.shape[1] if self.transposed else self.weight.shape[0]
        if self.bias.shape != (nb,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({nb},)")

    @property
    def in_channels(self):
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]


def conv_output_size(n, stride, padding):
    return (n + 2 * padding - KERNEL) // stride + 1


def tconv_output_size(n, stride, padding):
    return (n - 1) * stride - 2 * padding + KERNEL


def _im2col(xp, stride, out_sp):
    """(N, C, X, Y, Z) padded input -> (N, C*64, P) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (KERNEL,) * 3, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :out_sp[0], :out_sp[1], :out_sp[2]]
    # (N, C, Ox, Oy, Oz, kx, ky, kz) -> (N, C, kx, ky, kz, Ox, Oy, Oz)
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return cols.reshape(n, c * KERNEL ** 3, -1)


def _col2im(cols, c, padded_sp, stride, out_sp):
    """Adjoint of :func:`_im2col`: scatter-add patches into a padded grid."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, KERNEL, KERNEL, KERNEL, *out_sp)
    out = np.zeros((n, c) + tuple(padded_sp), dtype=cols.dtype)
    ox, oy, oz = out_sp
    for kx in range(KERNEL):
        for ky in range(KERNEL):
            for kz in range(KERNEL):
                out[:, :,
                    kx:kx + stride * (ox - 1) + 1:stride,
                    ky:ky + stride * (oy - 1) + 1:stride,
                    kz:kz + stride * (oz - 1) + 1:stride] += cols[:, :, kx, ky, kz]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _unpad(x, p):
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p, p:-p]


def _conv_forward(x, w, s, p):
    n, c = x.shape[:2]
    out_sp = tuple(conv_output_size(d, s, p) for d in x.shape[2:])
    if min(out_sp) < 1:
        raise ShapeError(f"input spatial dims {x.shape[2:]} too small for kernel 4")
    cols = _im2col(_pad(x, p), s, out_sp)
    wmat = w.reshape(w.shape[0], -1)
    out = np.matmul(wmat, cols)
    return out.reshape((n, w.shape[0]) + out_sp), cols


def _conv_adjoint(y, w, s, p, in_sp):
    """Apply the transpose of the input->output conv map to ``y``."""
    n = y.shape[0]
    wmat = w.reshape(w.shape[0], -1)
    cols = np.matmul(wmat.T, y.reshape(n, y.shape[1], -1))
    padded = tuple(d + 2 * p for d in in_sp)
    return _unpad(_col2im(cols, w.shape[1], padded, s, y.shape[2:]), p)


def conv3d(x, params: ConvParams):
    w, b, s, p = params.weight, params.bias, params.stride, params.padding
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    out, cols = _conv_forward(x.values, w.values, s, p)
    out += b.values.reshape(1, -1, 1, 1, 1)
    in_sp = x.shape[2:]

    def backward(g):
        n = g.shape[0]
        gflat = g.reshape(n, g.shape[1], -1)
        gw = gb = gx = None
        if _needs_grad(w):
            gw = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if _needs_grad(b):
            gb = gflat.sum(axis=(0, 2))
        if _needs_grad(x):
            gx = _conv_adjoint(g, w.values, s, p, in_sp)
        return gx, gw, gb
    return _make(out, (x, w, b), backward)


def tconv3d(x, params: ConvParams):
    """Transpose convolution: the adjoint of :func:`conv3d` plus a bias."""
    w, b, s, p = params.weight, params.bias, params.stride, params.padding
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"tconv3d: input has {x.shape[1]} channels, weight expects {w.shape[0]}")
    out_sp = tuple(tconv_output_size(d, s, p) for d in x.shape[2:])
    out = _conv_adjoint(x.values, w.values, s, p, out_sp)
    out = out + b.values.reshape(1, -1, 1, 1, 1)

    def backward(g):
        n = g.shape[0]
        gw = gb = gx = None
        cols = _im2col(_pad(g, p), s, x.shape[2:])
        if _needs_grad(w):
            xflat = x.values.reshape(n, x.shape[1], -1)
            gw = np.tensordot(xflat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if _needs_grad(b):
            gb = g.sum(axis=(0, 2, 3, 4))
        if _needs_grad(x):
            gx = np.matmul(w.values.reshape(w.shape[0], -1), cols).reshape(x.shape)
        return gx, gw, gb
    return _make(out, (x, w, b), backward)


# -- normalisation ---------------------------------------------------------------

def norm_layer(x, gamma, beta, mode="instance", eps=NORM_EPS):
    """Standardise per channel (and per sample for instance mode), then
    apply ``gamma * xhat + beta``."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if mode == "instance":
        axes = (2, 3, 4)
    elif mode == "batch":
        axes = (0, 2, 3, 4)
    else:
        raise ValueError(f"unknown norm mode {mode!r}")
    v = x.values
    m = np.prod([v.shape[a] for a in axes])
    mu = v.mean(axis=axes, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g_ = gamma.values.reshape(1, c, 1, 1, 1)
    out = xhat * g_ + beta.values.reshape(1, c, 1, 1, 1)

    def backward(g):
        red = (0, 2, 3, 4)
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = g * g_
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        gx = inv_std * (dxhat - s1 / m - xhat * s2 / m)
        return gx, ggamma, gbeta
    return _make(out, (x, gamma, beta), backward)
