"""Frequency State Space Block.

Pipeline for a feature map ``x[C, H, W]`` (H, W powers of two)::

    F = fft2(x);  A = |F|;  P = arg F
    m = max_hw(A)                               # per-channel amplitude peak
    A' = scale(m * clamp(vss2d_amp(A / m), 0))  # dynamic amplitude scaling
    P' = continuity(pi*tanh(vss2d_phase(P)/pi)) # bounded, wrap-safe smoothing
    Z  = complex_conv(A' * exp(i P'))           # 1x1 complex recombination
    out = hdr_tone_map(x + Re(ifft2(Z)), tau)

At initialization the scan readouts are zero, so ``A' = 0`` and the block
reduces to ``hdr_tone_map(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Var
from .ndtensor import ShapeError
from .ssm import SsmParams, param_shapes as ssm_param_shapes, vss2d_forward


@dataclass
class FssbParams:
    amp_fwd: SsmParams
    amp_bwd: SsmParams
    phase_fwd: SsmParams
    phase_bwd: SsmParams
    cconv_re: object        # [C, C, 1, 1]
    cconv_im: object        # [C, C, 1, 1]
    amp_gate_w: object      # [C]
    amp_gate_b: object      # [C]
    phase_kernel: object    # [C, C, 3, 3]
    hdr_threshold: float = 0.90

    def __post_init__(self):
        if not 0.0 < self.hdr_threshold < 1.0:
            raise ValueError(f"hdr_threshold must lie in (0, 1), got {self.hdr_threshold}")


SSM_GROUPS = ("amp_fwd", "amp_bwd", "phase_fwd", "phase_bwd")


def param_shapes(channels: int, patch: int, d_state: int) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` list of every tensor in one block."""
    d_model = channels * patch * patch
    shapes = []
    for group in SSM_GROUPS:
        shapes += [(f"{group}.{n}", s) for n, s in ssm_param_shapes(d_model, d_state)]
    shapes += [
        ("cconv_re", (channels, channels, 1, 1)),
        ("cconv_im", (channels, channels, 1, 1)),
        ("amp_gate_w", (channels,)),
        ("amp_gate_b", (channels,)),
        ("phase_kernel", (channels, channels, 3, 3)),
    ]
    return shapes


def init_params(channels: int, patch: int, d_state: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Near-identity initialization keyed like :func:`param_shapes`."""
    d_model = channels * patch * patch
    out: dict[str, np.ndarray] = {}
    for group in SSM_GROUPS:
        p = SsmParams.init(d_model, d_state, rng, zero_output=True)
        for name, value in zip(("a_log", "w_b", "w_c", "w_delta", "delta_bias", "d_skip"), p.as_tuple()):
            out[f"{group}.{name}"] = value
    out["cconv_re"] = np.eye(channels).reshape(channels, channels, 1, 1)
    out["cconv_im"] = np.zeros((channels, channels, 1, 1))
    out["amp_gate_w"] = np.zeros(channels)
    out["amp_gate_b"] = np.zeros(channels)
    out["phase_kernel"] = np.zeros((channels, channels, 3, 3))
    return out


def from_mapping(w, prefix: str = "", hdr_threshold: float = 0.90) -> FssbParams:
    """Assemble :class:`FssbParams` from a flat name -> tensor mapping."""
    def ssm(group):
        return SsmParams(*(w[f"{prefix}{group}.{n}"] for n in
                           ("a_log", "w_b", "w_c", "w_delta", "delta_bias", "d_skip")))
    return FssbParams(
        ssm("amp_fwd"), ssm("amp_bwd"), ssm("phase_fwd"), ssm("phase_bwd"),
        w[f"{prefix}cconv_re"], w[f"{prefix}cconv_im"],
        w[f"{prefix}amp_gate_w"], w[f"{prefix}amp_gate_b"],
        w[f"{prefix}phase_kernel"], hdr_threshold,
    )


def complex_conv(x, w_re, w_im) -> Var:
    """Complex 1x1 (or any odd size) convolution as four real convolutions."""
    x = x if isinstance(x, Var) else ops.const(x)
    if not np.iscomplexobj(x.value):
        raise TypeError("complex_conv expects a complex input")
    c_in = np.shape(ops._val(w_re))[1]
    if x.shape[0] != c_in or np.shape(ops._val(w_re)) != np.shape(ops._val(w_im)):
        raise ShapeError("complex_conv channel/weight shape mismatch")
    pad = np.shape(ops._val(w_re))[-1] // 2
    xr, xi = ops.real(x), ops.imag(x)
    out_re = ops.sub(ops.conv2d(xr, w_re, pad=pad), ops.conv2d(xi, w_im, pad=pad))
    out_im = ops.add(ops.conv2d(xr, w_im, pad=pad), ops.conv2d(xi, w_re, pad=pad))
    return ops.complex_(out_re, out_im)


def dynamic_amplitude_scaling(amp, gate_w, gate_b) -> Var:
    """Scale each channel by ``2*sigmoid(w*mean(log1p(amp)) + b)`` in (0, 2)."""
    a = amp if isinstance(amp, Var) else ops.const(amp)
    if np.any(a.value < 0):
        raise ValueError("amplitude must be non-negative")
    gmean = ops.mean(ops.log1p(a), axis=(1, 2))
    scale = ops.mul(ops.sigmoid(ops.add(ops.mul(gmean, gate_w), gate_b)), 2.0)
    return ops.mul(a, ops.reshape(scale, (-1, 1, 1)))


class PhaseStats:
    """Counts bins where the smoothed (cos, sin) pair collapsed to zero."""

    degenerate = 0


def phase_continuity(phase, kernel, eps: float = 1e-12) -> Var:
    """Smooth a phase field on its unit-circle embedding.

    ``(cos P, sin P)`` each get ``v + conv(v, kernel)`` (zero padding), and
    the result angle ``atan2`` lies in (-pi, pi].  Bins where the pair
    collapses below ``eps`` keep their input phase.
    """
    p = phase if isinstance(phase, Var) else ops.const(phase)
    pad = np.shape(ops._val(kernel))[-1] // 2
    c, s = ops.cos(p), ops.sin(p)
    c2 = ops.add(c, ops.conv2d(c, kernel, pad=pad))
    s2 = ops.add(s, ops.conv2d(s, kernel, pad=pad))
    # renormalizing (c2, s2) to unit modulus leaves atan2 unchanged
    out = ops.atan2(s2, c2)
    bad = (c2.value ** 2 + s2.value ** 2) < eps ** 2
    if np.any(bad):
        PhaseStats.degenerate += int(bad.sum())
        out = ops.where(bad, p, out)
    wrapped = out.value <= -np.pi
    if np.any(wrapped):
        out = ops.add(out, np.where(wrapped, 2 * np.pi, 0.0))
    return out


def _hdr_value(x, tau):
    k = 1.0 - tau
    e = np.maximum(x - tau, 0.0)
    return np.where(x > tau, tau + k * e / (e + k), x)


def _hdr_slope(x, tau):
    k = 1.0 - tau
    e = np.maximum(x - tau, 0.0)
    return np.where(x > tau, (k * k) / (e + k) ** 2, 1.0)


def hdr_tone_map(x, tau: float = 0.90):
    """Compress values above ``tau`` into ``[tau, 1)``; leave the rest as is.

    Above the threshold ``v -> tau + (1-tau) * e / (e + 1-tau)`` with
    ``e = v - tau``, which joins the identity with matching slope at tau.
    Accepts arrays or Vars and returns the same kind.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if isinstance(x, Var):
        return ops.unary(x, "hdr_tone_map", lambda v: _hdr_value(v, tau), lambda v, y: _hdr_slope(v, tau))
    return _hdr_value(np.asarray(x, dtype=np.float64), tau)


AMP_EPS = 1e-8


def amp_peak(amp) -> Var:
    """Per-channel maximum over frequency bins, shape ``[C, 1, 1]``."""
    a = amp if isinstance(amp, Var) else ops.const(amp)
    c = a.shape[0]
    flat = ops.reshape(a, (c, -1))
    idx = np.argmax(flat.value, axis=1)
    return ops.reshape(ops.getitem(flat, (np.arange(c), idx)), (c, 1, 1))


def fssb_forward(x, p: FssbParams, patch: int, use_hdr: bool = True,
                 method: str = "parallel") -> Var:
    x = x if isinstance(x, Var) else ops.const(x)
    spec = ops.fft2(x)
    amp = ops.cabs(spec)
    phase = ops.angle(spec)

    # the scan is quadratic in its input (B is input-dependent), so it sees
    # amplitudes divided by their per-channel peak; the level is restored after
    level = ops.add(amp_peak(amp), AMP_EPS)
    amp2 = vss2d_forward(p.amp_fwd, p.amp_bwd, ops.div(amp, level), patch, method)
    amp2 = ops.mul(ops.clamp_min(amp2, 0.0), level)
    amp2 = dynamic_amplitude_scaling(amp2, p.amp_gate_w, p.amp_gate_b)

    phase2 = vss2d_forward(p.phase_fwd, p.phase_bwd, phase, patch, method)
    # squash into (-pi, pi) so the scan cannot wind the phase without bound
    phase2 = ops.mul(ops.tanh(ops.mul(phase2, 1.0 / np.pi)), np.pi)
    phase2 = phase_continuity(phase2, p.phase_kernel)

    z = complex_conv(ops.polar(amp2, phase2), p.cconv_re, p.cconv_im)
    # independent amplitude/phase processing breaks conjugate symmetry,
    # so the spatial residual keeps only the real part
    out = ops.add(x, ops.real(ops.ifft2(z)))
    if use_hdr:
        out = hdr_tone_map(out, p.hdr_threshold)
    return out
