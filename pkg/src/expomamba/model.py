"""U-Net style encoder-decoder with frequency state-space blocks.

Layout for ``depth = D`` and base width ``c``::

    enc_l      conv block -> skip_l (c*2^l channels), 2x2 mean down   l < D
    bottleneck conv block (c*2^D) -> FSSB
    dec_l      bilinear up, concat skip_l, conv block, residual block, FSSB
    heads      1x1 conv per stage output -> 3 channels, upsampled, averaged,
               multiplied by a 3x3 colour matrix, sigmoid, HDR

Weights live in an ordered ``dict[str, np.ndarray]`` whose key order is
fixed by :func:`param_specs`; checkpoints rely on that order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import fssb, ops
from .autograd import Tape, Var
from .ndtensor import ShapeError
from .spectral import is_pow2

ABLATION_SWITCHES = ("use_double_conv", "use_residual_block", "use_fssb",
                     "use_hdr", "use_hdr_out", "use_da")


@dataclass(frozen=True)
class ModelConfig:
    base_channel: int = 8
    depth: int = 1
    patch: int = 4
    d_state: int = 4
    hdr_threshold: float = 0.90
    in_channels: int = 3
    use_double_conv: bool = True
    use_residual_block: bool = True
    use_fssb: bool = True
    use_hdr: bool = True
    use_hdr_out: bool = True
    use_da: bool = False
    scan: str = "parallel"

    def __post_init__(self):
        if self.base_channel < 1 or self.depth < 1 or self.d_state < 1 or self.patch < 1:
            raise ValueError("base_channel, depth, d_state and patch must be >= 1")
        if not 0.0 < self.hdr_threshold < 1.0:
            raise ValueError("hdr_threshold must lie in (0, 1)")
        if self.use_fssb and not is_pow2(self.patch):
            raise ValueError(f"patch must be a power of two when FSSB is enabled, got {self.patch}")
        if self.scan not in ("parallel", "sequential"):
            raise ValueError(f"unknown scan kernel {self.scan!r}")

    @property
    def align(self) -> int:
        return self.patch * 2 ** self.depth

    def channels(self, level: int) -> int:
        return self.base_channel * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


SMALL = ModelConfig(base_channel=48, depth=1, patch=4, d_state=16)
TINY = ModelConfig()


# -- registry ---------------------------------------------------------------

def _conv_block_specs(prefix, c_in, c_out, double):
    specs = [(f"{prefix}.conv1.w", (c_out, c_in, 3, 3)), (f"{prefix}.conv1.b", (c_out,))]
    if double:
        specs += [(f"{prefix}.conv2.w", (c_out, c_out, 3, 3)), (f"{prefix}.conv2.b", (c_out,))]
    return specs


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` registry for ``cfg``."""
    specs = []
    c_prev = cfg.in_channels
    for level in range(cfg.depth):
        specs += _conv_block_specs(f"enc{level}", c_prev, cfg.channels(level), cfg.use_double_conv)
        c_prev = cfg.channels(level)
    c_mid = cfg.channels(cfg.depth)
    specs += _conv_block_specs("mid", c_prev, c_mid, cfg.use_double_conv)
    if cfg.use_fssb:
        specs += [(f"mid.fssb.{n}", s) for n, s in fssb.param_shapes(c_mid, cfg.patch, cfg.d_state)]
    heads = [("head_mid", c_mid)]
    for level in reversed(range(cfg.depth)):
        c = cfg.channels(level)
        specs += _conv_block_specs(f"dec{level}", cfg.channels(level + 1) + c, c, cfg.use_double_conv)
        if cfg.use_residual_block:
            specs += [(f"dec{level}.res.conv1.w", (c, c, 3, 3)), (f"dec{level}.res.conv1.b", (c,)),
                      (f"dec{level}.res.conv2.w", (c, c, 3, 3)), (f"dec{level}.res.conv2.b", (c,))]
        if cfg.use_fssb:
            specs += [(f"dec{level}.fssb.{n}", s) for n, s in fssb.param_shapes(c, cfg.patch, cfg.d_state)]
        heads.append((f"head_dec{level}", c))
    for name, c in heads:
        specs += [(f"{name}.w", (3, c, 1, 1)), (f"{name}.b", (3,))]
    specs.append(("color_matrix", (3, 3)))
    return specs


def param_count(cfg: ModelConfig) -> int:
    return int(sum(int(np.prod(s, dtype=np.int64)) for _, s in param_specs(cfg)))


def init_weights(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded initialization in registry order.

    Convolutions draw from He-uniform U(-b, b) with ``b = sqrt(6 / ((1 + 0.01**2) * fan_in))``
    so activations keep their scale through the leaky ReLUs; the second
    residual conv, the FSSB scan readouts and the FSSB gates start at zero
    so those blocks are exact identities; the colour matrix is identity.
    """
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    fssb_cache: dict[str, dict[str, np.ndarray]] = {}
    for name, shape in param_specs(cfg):
        if ".fssb." in name:
            prefix, key = name.split(".fssb.", 1)
            if prefix not in fssb_cache:
                c = cfg.channels(cfg.depth) if prefix == "mid" else cfg.channels(int(prefix[3:]))
                fssb_cache[prefix] = fssb.init_params(c, cfg.patch, cfg.d_state, rng)
            w[name] = fssb_cache[prefix][key]
        elif name == "color_matrix":
            w[name] = np.eye(3)
        elif ".res.conv2." in name:
            w[name] = np.zeros(shape)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / ((1.0 + 0.01 ** 2) * fan_in))
            w[name] = rng.uniform(-bound, bound, shape)
        else:
            w[name] = np.zeros(shape)
    return w


def check_weights(cfg: ModelConfig, weights: Mapping) -> None:
    expected = param_specs(cfg)
    got = [(k, tuple(np.shape(ops._val(v)))) for k, v in weights.items()]
    if got != [(n, tuple(s)) for n, s in expected]:
        raise ShapeError("weights do not match the registry of this ModelConfig")


# -- blocks -------------------------------------------------------------------

def conv_block(x, w: Mapping, prefix: str, double: bool = True) -> Var:
    """3x3 conv + bias + leaky ReLU, twice when ``double`` (DoubleConv)."""
    y = ops.leaky_relu(ops.conv2d(x, w[f"{prefix}.conv1.w"], w[f"{prefix}.conv1.b"], pad=1))
    if double:
        y = ops.leaky_relu(ops.conv2d(y, w[f"{prefix}.conv2.w"], w[f"{prefix}.conv2.b"], pad=1))
    return y


def double_conv(x, w: Mapping, prefix: str) -> Var:
    return conv_block(x, w, prefix, double=True)


def residual_block(x, w: Mapping, prefix: str) -> Var:
    """``x + conv(lrelu(conv(x)))``."""
    y = ops.leaky_relu(ops.conv2d(x, w[f"{prefix}.conv1.w"], w[f"{prefix}.conv1.b"], pad=1))
    y = ops.conv2d(y, w[f"{prefix}.conv2.w"], w[f"{prefix}.conv2.b"], pad=1)
    return ops.add(x, y)


def encoder_stage(x, cfg: ModelConfig, w: Mapping, level: int):
    h, wd = x.shape[-2:]
    if h % 2 or wd % 2:
        raise ShapeError(f"encoder stage needs even extents, got {h}x{wd}")
    skip = conv_block(x, w, f"enc{level}", cfg.use_double_conv)
    return skip, ops.resample2x(skip, "down", "bilinear")


def _fssb(x, cfg: ModelConfig, w: Mapping, prefix: str) -> Var:
    p = fssb.from_mapping(w, f"{prefix}.fssb.", cfg.hdr_threshold)
    return fssb.fssb_forward(x, p, cfg.patch, use_hdr=cfg.use_hdr, method=cfg.scan)


def decoder_stage(down, skip, cfg: ModelConfig, w: Mapping, level: int) -> Var:
    up = ops.resample2x(down, "up", "bilinear")
    if up.shape[1:] != skip.shape[1:]:
        raise ShapeError(f"decoder shapes differ: up {up.shape} vs skip {skip.shape}")
    y = conv_block(ops.concat([up, skip], axis=0), w, f"dec{level}", cfg.use_double_conv)
    if cfg.use_residual_block:
        y = residual_block(y, w, f"dec{level}.res")
    if cfg.use_fssb:
        y = _fssb(y, cfg, w, f"dec{level}")
    return y


def deep_supervise_combine(stage_outputs, heads, color_matrix, size) -> Var:
    """Project, upsample and average stage outputs, then apply the colour matrix.

    ``heads`` is a list of ``(w[3,C,1,1], b[3])`` pairs, one per stage.
    """
    if not stage_outputs:
        raise ValueError("need at least one stage output")
    total = None
    for y, (hw, hb) in zip(stage_outputs, heads):
        p = ops.conv2d(y, hw, hb)
        while p.shape[-2] < size[0]:
            p = ops.resample2x(p, "up", "bilinear")
        total = p if total is None else ops.add(total, p)
    if len(stage_outputs) > 1:
        total = ops.mul(total, 1.0 / len(stage_outputs))
    return ops.einsum("ck,khw->chw", color_matrix, total)


# -- forward --------------------------------------------------------------------

def padded_extent(n: int, align: int) -> int:
    """Smallest power-of-two multiple of ``align`` that is >= ``n``."""
    target = align
    while target < n:
        target *= 2
    return target


def pad_amounts(h: int, w: int, cfg: ModelConfig):
    ph = padded_extent(h, cfg.align) - h
    pw = padded_extent(w, cfg.align) - w
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def forward(x, cfg: ModelConfig, weights: Mapping, return_stages: bool = False):
    """Enhance ``x[3, H, W]`` in [0, 1]; returns a Var of the same shape in [0, 1).

    Inputs are reflection padded to power-of-two multiples of
    ``patch * 2**depth`` and the output is cropped back.
    """
    x = x if isinstance(x, Var) else ops.const(np.asarray(x, dtype=np.float64))
    if x.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected [{cfg.in_channels}, H, W], got {x.shape}")
    h, wd = x.shape[1:]
    top, bottom, left, right = pad_amounts(h, wd, cfg)
    xp = ops.pad_reflect(x, top, bottom, left, right)
    size = xp.shape[1:]

    skips = []
    y = xp
    for level in range(cfg.depth):
        skip, y = encoder_stage(y, cfg, weights, level)
        skips.append(skip)
    y = conv_block(y, weights, "mid", cfg.use_double_conv)
    if cfg.use_fssb:
        y = _fssb(y, cfg, weights, "mid")
    stages = [y]
    heads = [(weights["head_mid.w"], weights["head_mid.b"])]
    for level in reversed(range(cfg.depth)):
        y = decoder_stage(y, skips[level], cfg, weights, level)
        stages.append(y)
        heads.append((weights[f"head_dec{level}.w"], weights[f"head_dec{level}.b"]))

    out = deep_supervise_combine(stages, heads, weights["color_matrix"], size)
    out = ops.sigmoid(out)
    if cfg.use_hdr_out:
        out = fssb.hdr_tone_map(out, cfg.hdr_threshold)
    out = ops.getitem(out, (slice(None), slice(top, top + h), slice(left, left + wd)))
    return (out, stages) if return_stages else out


def leaves(tape: Tape, weights: Mapping) -> dict[str, Var]:
    """Register every weight as a gradient-requiring leaf on ``tape``."""
    return {k: tape.leaf(v, name=k) for k, v in weights.items()}


def infer(x: np.ndarray, cfg: ModelConfig, weights: Mapping) -> np.ndarray:
    """Forward pass without recording; returns a plain array."""
    return forward(x, cfg, weights).value

