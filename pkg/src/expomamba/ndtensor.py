"""Dense float64 tensor kernel.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 (complex
tensors use complex128).  Everything here is a pure function: inputs are
never modified and every result is a fresh array.

Conventions used throughout the package:

* row-major ``[C, H, W]`` layout for images and feature maps;
* ``conv2d`` is cross-correlation with zero padding;
* the median of an even number of elements is the lower middle element.
"""

from __future__ import annotations

import os
from typing import NamedTuple, Sequence

import numpy as np

DEBUG = os.environ.get("EXPOMAMBA_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def _debug_scan(x: np.ndarray, where: str) -> np.ndarray:
    if DEBUG:
        check_finite(x, where)
    return x


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Convert to a finite float64 (or complex128) array."""
    arr = np.array(x, dtype=dtype, copy=True)
    if arr.ndim and 0 in arr.shape:
        raise ShapeError(f"zero extent in shape {arr.shape}")
    return check_finite(arr, "construction")


def build(shape: Sequence[int], fill) -> np.ndarray:
    """Build a tensor of ``shape`` from a scalar fill or a flat value list."""
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"every extent must be >= 1, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    if np.isscalar(fill):
        return check_finite(np.full(shape, float(fill)), "build")
    values = np.asarray(fill, dtype=np.float64).ravel()
    if values.size != count:
        raise ShapeError(f"fill has {values.size} values, shape {shape} needs {count}")
    return check_finite(values.reshape(shape).copy(), "build")


def _broadcast_operand(a: np.ndarray, b) -> np.ndarray:
    # allowed: equal shapes, scalar, or per-channel vector over axis 0
    b = np.asarray(b, dtype=a.dtype if np.iscomplexobj(a) else np.float64)
    if b.shape == a.shape or b.size == 1:
        return b.reshape(a.shape) if b.shape == a.shape else b.reshape(())
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[0]:
        return b.reshape((-1,) + (1,) * (a.ndim - 1))
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")


def map2(a, b, op: str, strict: bool = True) -> np.ndarray:
    """Elementwise binary op with scalar / per-channel broadcasting of ``b``.

    ``op`` is one of ``add``, ``sub``, ``mul``, ``div``, ``max``.  In strict
    mode a zero divisor raises instead of producing inf.
    """
    a = np.asarray(a, dtype=np.float64)
    bb = _broadcast_operand(a, b)
    if op == "add":
        out = a + bb
    elif op == "sub":
        out = a - bb
    elif op == "mul":
        out = a * bb
    elif op == "div":
        if strict and np.any(bb == 0):
            raise ZeroDivisionError("division by zero in map2")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a / bb
    elif op == "max":
        out = np.maximum(a, bb)
    else:
        raise ValueError(f"unknown op {op!r}")
    return _debug_scan(np.array(out, dtype=np.float64), f"map2[{op}]")


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _debug_scan(a @ b, "matmul")


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral conv output: extent {n}, kernel {k}, stride {stride}, pad {pad}"
        )
    return span // stride + 1


def _conv_geometry(x_shape, k_shape, stride, pad):
    c, h, w = x_shape
    o, kc, kh, kw = k_shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, got {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if pad < 0 or stride < 1:
        raise ShapeError("pad must be >= 0 and stride >= 1")
    return conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)


def conv2d(x, k, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2D cross-correlation of ``x[C,H,W]`` with ``k[O,C,kh,kw]``."""
    x = np.asarray(x)
    k = np.asarray(k)
    ho, wo = _conv_geometry(x.shape, k.shape, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((k.shape[0], ho, wo), dtype=np.result_type(x, k))
    for i in range(k.shape[2]):
        for j in range(k.shape[3]):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += np.tensordot(k[:, :, i, j], patch, axes=(1, 0))
    return _debug_scan(out, "conv2d")


def conv2d_grad_input(g, k, x_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input."""
    k = np.asarray(k)
    c, h, w = x_shape
    ho, wo = g.shape[1:]
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.result_type(g, k))
    for i in range(k.shape[2]):
        for j in range(k.shape[3]):
            gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                np.tensordot(k[:, :, i, j], g, axes=(0, 0))
            )
    return gxp[:, pad:pad + h, pad:pad + w] if pad else gxp


def conv2d_grad_kernel(g, x, k_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its kernel."""
    x = np.asarray(x)
    ho, wo = g.shape[1:]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    gk = np.zeros(k_shape, dtype=np.result_type(g, x))
    for i in range(k_shape[2]):
        for j in range(k_shape[3]):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            gk[:, :, i, j] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
    return gk


# -- resampling -------------------------------------------------------------

def _up_linear_1d(x: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel-centred linear interpolation with edge clamping
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.75 * x + 0.25 * prev
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_linear_1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gx, -1, axis)


def resample2x(x, direction: str, mode: str = "bilinear") -> np.ndarray:
    """Halve (``down``) or double (``up``) the two trailing extents.

    ``down`` uses a 2x2 mean for ``bilinear`` and the top-left sample for
    ``nearest``; ``up`` uses linear interpolation or replication.
    """
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if direction == "down":
        if h % 2 or w % 2:
            raise ShapeError(f"down-sampling needs even extents, got {h}x{w}")
        if mode == "nearest":
            out = x[..., ::2, ::2].copy()
        elif mode == "bilinear":
            out = 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2]
                          + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])
        else:
            raise ValueError(f"unknown mode {mode!r}")
    elif direction == "up":
        if mode == "nearest":
            out = np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)
        elif mode == "bilinear":
            out = _up_linear_1d(_up_linear_1d(x, x.ndim - 2), x.ndim - 1)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return _debug_scan(out, "resample2x")


def resample2x_adjoint(g, direction: str, mode: str = "bilinear") -> np.ndarray:
    """Transpose of the linear map :func:`resample2x`."""
    g = np.asarray(g)
    if direction == "down":
        h, w = g.shape[-2:]
        out = np.zeros(g.shape[:-2] + (2 * h, 2 * w), dtype=g.dtype)
        if mode == "nearest":
            out[..., ::2, ::2] = g
        else:
            q = 0.25 * g
            for di in (0, 1):
                for dj in (0, 1):
                    out[..., di::2, dj::2] = q
        return out
    if mode == "nearest":
        return (g[..., 0::2, 0::2] + g[..., 1::2, 0::2]
                + g[..., 0::2, 1::2] + g[..., 1::2, 1::2])
    return _up_linear_1d_adjoint(_up_linear_1d_adjoint(g, g.ndim - 1), g.ndim - 2)


# -- statistics -------------------------------------------------------------

class Stats(NamedTuple):
    mean: np.ndarray
    median: np.ndarray
    min: np.ndarray
    max: np.ndarray


def median_lower(x, axis=None) -> np.ndarray:
    """Median using the lower middle element for even counts."""
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        flat = np.sort(x.ravel())
        if flat.size == 0:
            raise ShapeError("empty reduction")
        return flat[(flat.size - 1) // 2]
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x, keep + list(axes))
    moved = moved.reshape(moved.shape[:len(keep)] + (-1,))
    if moved.shape[-1] == 0:
        raise ShapeError("empty reduction")
    return np.sort(moved, axis=-1)[..., (moved.shape[-1] - 1) // 2]


def reduce_stats(x, axis=None) -> Stats:
    """Mean, lower median, min and max over ``axis`` (all axes if None)."""
    x = np.asarray(x, dtype=np.float64)
    if axis is not None and not np.isscalar(axis) and len(axis) == 0:
        raise ShapeError("empty axis selection")
    if x.size == 0:
        raise ShapeError("empty reduction")
    return Stats(
        mean=np.mean(x, axis=axis if axis is None else tuple(np.atleast_1d(axis))),
        median=median_lower(x, axis),
        min=np.min(x, axis=axis if axis is None else tuple(np.atleast_1d(axis))),
        max=np.max(x, axis=axis if axis is None else tuple(np.atleast_1d(axis))),
    )
