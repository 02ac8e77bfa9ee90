"""Differentiable operations on :class:`~expomamba.autograd.Var`.

Every function accepts Vars or plain arrays/scalars (treated as constants)
and returns a Var.  Binary elementwise ops follow numpy broadcasting; the
gradient is summed back to each operand's shape.
"""

from __future__ import annotations

import numpy as np

from . import ndtensor, spectral
from .autograd import Tape, Var


def _tape(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var) and x.id is not None:
            return x.tape
    return _NULL


_NULL = Tape(enabled=False)


def _val(x):
    return x.value if isinstance(x, Var) else x


def const(x) -> Var:
    return Var(np.asarray(x, dtype=np.result_type(np.asarray(x), np.float64)))


def _fit(g, like):
    """Sum broadcast axes of ``g`` away and drop the imaginary part for real inputs."""
    like = np.asarray(like)
    if g.shape != like.shape:
        extra = g.ndim - like.ndim
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, d in enumerate(like.shape) if d == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(like.shape)
    if not np.iscomplexobj(like) and np.iscomplexobj(g):
        g = g.real
    return g


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Var:
    def fwd(x, y):
        return x + y, lambda g: (_fit(g, x), _fit(g, y))
    return _tape(a, b).record("add", (a, b), fwd)


def sub(a, b) -> Var:
    def fwd(x, y):
        return x - y, lambda g: (_fit(g, x), _fit(-g, y))
    return _tape(a, b).record("sub", (a, b), fwd)


def mul(a, b) -> Var:
    def fwd(x, y):
        return x * y, lambda g: (_fit(g * np.conj(y), x), _fit(g * np.conj(x), y))
    return _tape(a, b).record("mul", (a, b), fwd)


def div(a, b) -> Var:
    def fwd(x, y):
        out = x / y

        def vjp(g):
            gx = g / np.conj(y)
            return _fit(gx, x), _fit(-gx * np.conj(out), y)
        return out, vjp
    return _tape(a, b).record("div", (a, b), fwd)


def neg(a) -> Var:
    return _tape(a).record("neg", (a,), lambda x: (-x, lambda g: (-g,)))


def maximum(a, b) -> Var:
    def fwd(x, y):
        mask = x >= y
        return np.where(mask, x, y), lambda g: (_fit(g * mask, x), _fit(g * ~mask, y))
    return _tape(a, b).record("maximum", (a, b), fwd)


def atan2(y, x) -> Var:
    def fwd(yv, xv):
        r2 = xv * xv + yv * yv
        safe = np.where(r2 == 0, 1.0, r2)

        def vjp(g):
            gy = np.where(r2 == 0, 0.0, g * xv / safe)
            gx = np.where(r2 == 0, 0.0, -g * yv / safe)
            return _fit(gy, yv), _fit(gx, xv)
        return np.arctan2(yv, xv), vjp
    return _tape(y, x).record("atan2", (y, x), fwd)


def where(mask, a, b) -> Var:
    mask = np.asarray(mask, dtype=bool)

    def fwd(x, y):
        return np.where(mask, x, y), lambda g: (_fit(g * mask, x), _fit(g * ~mask, y))
    return _tape(a, b).record("where", (a, b), fwd)


# -- elementwise unary ------------------------------------------------------

def unary(a, kind: str, f, df) -> Var:
    """Elementwise op with value ``f(x)`` and real derivative ``df(x, fx)``."""
    def fwd(x):
        y = f(x)
        return y, lambda g: (g * df(x, y),)
    return _tape(a).record(kind, (a,), fwd)


def exp(a):
    return unary(a, "exp", np.exp, lambda x, y: np.conj(y))


def log(a):
    return unary(a, "log", np.log, lambda x, y: 1.0 / x)


def log1p(a):
    return unary(a, "log1p", np.log1p, lambda x, y: 1.0 / (1.0 + x))


def sqrt(a):
    return unary(a, "sqrt", np.sqrt, lambda x, y: 0.5 / y)


def square(a):
    return unary(a, "square", np.square, lambda x, y: 2.0 * np.conj(x))


def cos(a):
    return unary(a, "cos", np.cos, lambda x, y: -np.sin(x))


def sin(a):
    return unary(a, "sin", np.sin, lambda x, y: np.cos(x))


def tanh(a):
    return unary(a, "tanh", np.tanh, lambda x, y: 1.0 - y * y)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    return unary(a, "sigmoid", _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a):
    return unary(a, "softplus", lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def leaky_relu(a, slope: float = 0.01):
    return unary(a, "leaky_relu", lambda x: np.where(x > 0, x, slope * x),
                 lambda x, y: np.where(x > 0, 1.0, slope))


def clamp_min(a, lo: float = 0.0):
    # gradient passes where x >= lo, so a value sitting exactly at the
    # bound can still move back into the feasible region
    return unary(a, "clamp_min", lambda x: np.maximum(x, lo),
                 lambda x, y: (x >= lo).astype(np.float64))


def abs(a):
    return unary(a, "abs", np.abs, lambda x, y: np.sign(x))


# -- reductions and shape ---------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Var:
    def fwd(x):
        out = np.sum(x, axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)
        return out, vjp
    return _tape(a).record("sum", (a,), fwd)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    x = _val(a)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([x.shape[i] for i in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Var:
    def fwd(x):
        return x.reshape(shape), lambda g: (g.reshape(x.shape),)
    return _tape(a).record("reshape", (a,), fwd)


def transpose(a, axes) -> Var:
    inv = np.argsort(axes)

    def fwd(x):
        return np.transpose(x, axes), lambda g: (np.transpose(g, inv),)
    return _tape(a).record("transpose", (a,), fwd)


def flip(a, axis: int = 0) -> Var:
    def fwd(x):
        return np.flip(x, axis).copy(), lambda g: (np.flip(g, axis).copy(),)
    return _tape(a).record("flip", (a,), fwd)


def getitem(a, index) -> Var:
    def fwd(x):
        def vjp(g):
            out = np.zeros_like(x, dtype=np.result_type(x, g))
            np.add.at(out, index, g)
            return (out,)
        return np.array(x[index]), vjp
    return _tape(a).record("getitem", (a,), fwd)


def take(a, indices, axis: int) -> Var:
    indices = np.asarray(indices, dtype=np.intp)

    def fwd(x):
        def vjp(g):
            out = np.zeros_like(x, dtype=np.result_type(x, g))
            gm = np.moveaxis(g, axis, 0)
            om = np.moveaxis(out, axis, 0)
            np.add.at(om, indices, gm)
            return (out,)
        return np.take(x, indices, axis=axis), vjp
    return _tape(a).record("take", (a,), fwd)


def concat(xs, axis: int = 0) -> Var:
    sizes = [np.shape(_val(x))[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*vals):
        return np.concatenate(vals, axis=axis), lambda g: tuple(np.split(g, splits, axis=axis))
    return _tape(*xs).record("concat", tuple(xs), fwd)


def reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for reflection padding (edge not repeated), any width."""
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad_reflect(a, top: int, bottom: int, left: int, right: int) -> Var:
    x = a
    h, w = np.shape(_val(a))[-2:]
    if top or bottom:
        x = take(x, reflect_indices(h, top, bottom), axis=-2)
    if left or right:
        x = take(x, reflect_indices(w, left, right), axis=-1)
    return x if isinstance(x, Var) else const(x)


# -- linear algebra and convolution ----------------------------------------

def matmul(a, b) -> Var:
    def fwd(x, y):
        out = x @ y

        def vjp(g):
            # promote vectors the way @ does, then drop the added axes again
            x2 = x[None, :] if x.ndim == 1 else x
            y2 = y[:, None] if y.ndim == 1 else y
            g2 = np.reshape(g, np.shape(x2 @ y2))
            gx = g2 @ np.conj(np.swapaxes(y2, -1, -2))
            gy = np.conj(np.swapaxes(x2, -1, -2)) @ g2
            return _fit(gx.reshape(x.shape) if x.ndim == 1 else gx, x), \
                _fit(gy.reshape(y.shape) if y.ndim == 1 else gy, y)
        return out, vjp
    return _tape(a, b).record("matmul", (a, b), fwd)


def einsum(spec: str, a, b) -> Var:
    """Two-operand einsum without repeated or summed-away-only indices."""
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in out and c not in other for c in s):
            raise ValueError(f"einsum {spec!r}: index only in one operand is unsupported")

    def fwd(x, y):
        def vjp(g):
            gx = np.einsum(f"{out},{sb}->{sa}", g, np.conj(y))
            gy = np.einsum(f"{out},{sa}->{sb}", g, np.conj(x))
            return _fit(gx, x), _fit(gy, y)
        return np.einsum(spec, x, y), vjp
    return _tape(a, b).record("einsum", (a, b), fwd)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Var:
    def fwd(xv, wv):
        def vjp(g):
            return (ndtensor.conv2d_grad_input(g, wv, xv.shape, stride, pad),
                    ndtensor.conv2d_grad_kernel(g, xv, wv.shape, stride, pad))
        return ndtensor.conv2d(xv, wv, stride, pad), vjp
    out = _tape(x, w).record("conv2d", (x, w), fwd)
    if b is not None:
        out = add(out, reshape(b, (-1, 1, 1)))
    return out


def resample2x(a, direction: str, mode: str = "bilinear") -> Var:
    def fwd(x):
        return (ndtensor.resample2x(x, direction, mode),
                lambda g: (ndtensor.resample2x_adjoint(g, direction, mode),))
    return _tape(a).record(f"resample2x_{direction}", (a,), fwd)


# -- complex and spectral ---------------------------------------------------

def complex_(re, im) -> Var:
    def fwd(r, i):
        return r + 1j * i, lambda g: (_fit(g.real, r), _fit(g.imag, i))
    return _tape(re, im).record("complex", (re, im), fwd)


def real(z) -> Var:
    return _tape(z).record("real", (z,), lambda v: (v.real.copy(), lambda g: (g + 0j,)))


def imag(z) -> Var:
    return _tape(z).record("imag", (z,), lambda v: (v.imag.copy(), lambda g: (1j * g,)))


def cabs(z) -> Var:
    def fwd(v):
        r = np.abs(v)
        safe = np.where(r == 0, 1.0, r)
        return r, lambda g: (np.where(r == 0, 0.0, g * v / safe),)
    return _tape(z).record("cabs", (z,), fwd)


def angle(z) -> Var:
    """Principal argument in (-pi, pi]; zero bins get phase 0."""
    def fwd(v):
        r2 = v.real ** 2 + v.imag ** 2
        ph = np.where(r2 == 0, 0.0, spectral.wrap_phase(np.arctan2(v.imag, v.real)))
        safe = np.where(r2 == 0, 1.0, r2)
        return ph, lambda g: (np.where(r2 == 0, 0.0, g * 1j * v / safe),)
    return _tape(z).record("angle", (z,), fwd)


def polar(amp, phase) -> Var:
    def fwd(a, p):
        rot = np.cos(p) + 1j * np.sin(p)

        def vjp(g):
            t = np.conj(g) * rot
            return _fit(t.real, a), _fit(-a * t.imag, p)
        return a * rot, vjp
    return _tape(amp, phase).record("polar", (amp, phase), fwd)


def fft2(a) -> Var:
    def fwd(x):
        h, w = x.shape[-2:]
        return spectral.fft2(x), lambda g: (_fit(h * w * spectral.ifft2_complex(g), x),)
    return _tape(a).record("fft2", (a,), fwd)


def ifft2(a) -> Var:
    """Complex inverse transform (take ``real`` explicitly if wanted)."""
    def fwd(x):
        h, w = x.shape[-2:]
        return spectral.ifft2_complex(x), lambda g: (_fit(spectral.fft2(g) / (h * w), x),)
    return _tape(a).record("ifft2", (a,), fwd)
