"""2D discrete Fourier analysis on ``[C, H, W]`` tensors.

Forward transforms are unnormalized; inverse transforms carry ``1/(H*W)``.
The transform is an iterative radix-2 Cooley-Tukey (decimation in time)
with cached twiddle tables, so every transformed extent must be a power of
two.  :func:`pad_pow2` zero-pads arbitrary images for callers that need it.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .ndtensor import ShapeError


class ResidueError(ValueError):
    """Inverse transform left a significant imaginary part."""


class AmpPhase(NamedTuple):
    amplitude: np.ndarray
    phase: np.ndarray


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(n: int, inverse: bool) -> tuple[np.ndarray, ...]:
    # one table per stage; entry 0 is exactly 1+0j
    sign = 1.0 if inverse else -1.0
    tables = []
    m = 1
    while m < n:
        k = np.arange(m)
        ang = sign * np.pi * k / m
        tw = np.cos(ang) + 1j * np.sin(ang)
        tw[0] = 1.0 + 0.0j
        tables.append(tw)
        m *= 2
    return tuple(tables)


# rows per chunk are chosen so one chunk (plus its buffers) stays in L2
_CHUNK_ELEMS = 1 << 14


# the first log2(_BASE) butterfly stages act on contiguous blocks and are
# applied at once as a small DFT matrix; this avoids numpy work on tiny axes
_BASE = 16


@lru_cache(maxsize=None)
def _base_matrix(base: int, inverse: bool) -> np.ndarray:
    # block DFT whose input arrives in bit-reversed order, transposed for y @ M
    sign = 1.0 if inverse else -1.0
    k = np.arange(base)
    ang = sign * 2.0 * np.pi * np.outer(_bitrev(base), k) / base
    m = np.cos(ang) + 1j * np.sin(ang)
    m.setflags(write=False)
    return m


def _fft_rows(y: np.ndarray, inverse: bool) -> np.ndarray:
    b, n = y.shape
    y = y[:, _bitrev(n)]
    base = min(n, _BASE)
    if base > 1:
        y = (y.reshape(b, n // base, base) @ _base_matrix(base, inverse)).reshape(b, n)
    buf = np.empty_like(y)
    m = base
    for tw in _twiddles(n, inverse)[base.bit_length() - 1:]:
        src = y.reshape(b, n // (2 * m), 2, m)
        dst = buf.reshape(b, n // (2 * m), 2, m)
        odd = src[:, :, 1] * tw
        np.add(src[:, :, 0], odd, out=dst[:, :, 0])
        np.subtract(src[:, :, 0], odd, out=dst[:, :, 1])
        y, buf = buf, y
        m *= 2
    return y


def _fft_last(rows: np.ndarray, inverse: bool) -> np.ndarray:
    # rows: contiguous [B, n]
    n = rows.shape[-1]
    out = np.empty_like(rows)
    step = max(1, _CHUNK_ELEMS // n)
    for i in range(0, rows.shape[0], step):
        out[i:i + step] = _fft_rows(rows[i:i + step], inverse)
    return out


def fft1d(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Unnormalized radix-2 DFT along ``axis`` (no 1/N on the inverse)."""
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if not is_pow2(n):
        raise ShapeError(f"FFT extent must be a power of two, got {n}")
    lead = x.shape[:-1]
    out = _fft_last(np.ascontiguousarray(x).reshape(-1, n), inverse)
    return np.moveaxis(out.reshape(lead + (n,)), -1, axis)


def fft2(x) -> np.ndarray:
    """Per-channel 2D DFT over the two trailing axes (unnormalized)."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if not (is_pow2(h) and is_pow2(w)):
        raise ShapeError(f"fft2 needs power-of-two extents, got {h}x{w}")
    return _fft2(x, inverse=False)


def _fft2(x: np.ndarray, inverse: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    rows = _fft_last(np.ascontiguousarray(x).reshape(-1, w), inverse)
    cols = np.swapaxes(rows.reshape(-1, h, w), -1, -2).reshape(-1, h)
    cols = _fft_last(cols, inverse)
    return np.swapaxes(cols.reshape(-1, w, h), -1, -2).reshape(lead + (h, w))


def ifft2_complex(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.complex128)
    h, w = f.shape[-2:]
    if not (is_pow2(h) and is_pow2(w)):
        raise ShapeError(f"ifft2 needs power-of-two extents, got {h}x{w}")
    return _fft2(f, inverse=True) / (h * w)


def ifft2(f, tol: float = 1e-9) -> np.ndarray:
    """Real inverse transform.

    The imaginary residue is discarded when it is below ``tol`` relative to
    the largest real magnitude (floor 1); larger residues mean the spectrum
    was not conjugate-symmetric and raise :class:`ResidueError`.
    """
    z = ifft2_complex(f)
    residue = float(np.max(np.abs(z.imag))) if z.size else 0.0
    scale = max(1.0, float(np.max(np.abs(z.real))))
    if residue > tol * scale:
        raise ResidueError(f"imaginary residue {residue:.3e} after inverse transform")
    return z.real.copy()


def naive_dft2(x) -> np.ndarray:
    """O(N^2) double-sum DFT, kept as a reference for tests and debugging."""
    x = np.asarray(x, dtype=np.complex128)
    h, w = x.shape[-2:]
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fh @ x @ fw.T


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Map ``-pi`` onto ``pi`` so phases lie in ``(-pi, pi]``."""
    return np.where(phase <= -np.pi, np.pi, phase)


def split_amp_phase(f) -> AmpPhase:
    f = np.asarray(f, dtype=np.complex128)
    amp = np.abs(f)
    phase = wrap_phase(np.arctan2(f.imag, f.real))
    phase = np.where(amp == 0, 0.0, phase)
    return AmpPhase(amp, phase)


def merge_amp_phase(ap: AmpPhase) -> np.ndarray:
    amp = np.asarray(ap.amplitude, dtype=np.float64)
    if np.any(amp < 0):
        raise ValueError("amplitude must be non-negative")
    phase = np.asarray(ap.phase, dtype=np.float64)
    return amp * np.cos(phase) + 1j * (amp * np.sin(phase))


def uniform_phase_shift(f, dphi: float) -> np.ndarray:
    """Rotate every bin of a spectrum by ``exp(i*dphi)``."""
    return np.asarray(f, dtype=np.complex128) * complex(np.cos(dphi), np.sin(dphi))


def pad_pow2(x: np.ndarray) -> np.ndarray:
    """Zero-pad the trailing two axes up to the next powers of two."""
    h, w = x.shape[-2:]
    ph, pw = next_pow2(h) - h, next_pow2(w) - w
    if ph == 0 and pw == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, widths)


def fftshift2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    return np.roll(x, (h // 2, w // 2), axis=(-2, -1))
