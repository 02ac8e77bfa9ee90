"""Losses, RMSProp, warm-up cosine schedule, dynamic patch batches, epoch loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import model, ops
from .autograd import Tape, Var, grad_of
from .ndtensor import ShapeError


class TrainingError(RuntimeError):
    pass


# -- losses -------------------------------------------------------------------

def _check_same(pred, target):
    if np.shape(ops._val(pred)) != np.shape(ops._val(target)):
        raise ShapeError(f"shape mismatch {np.shape(ops._val(pred))} vs {np.shape(ops._val(target))}")


def l1_loss(pred, target) -> Var:
    _check_same(pred, target)
    return ops.mean(ops.abs(ops.sub(pred, target)))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@lru_cache(maxsize=None)
def _gaussian_band(n: int) -> np.ndarray:
    """``[n, n - window + 1]`` matrix applying the 1D Gaussian in valid mode."""
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    m = n - SSIM_WINDOW + 1
    band = np.zeros((n, m))
    for j in range(m):
        band[j:j + SSIM_WINDOW, j] = g
    band.setflags(write=False)
    return band


def _blur(x) -> Var:
    # reflect padding gives every pixel a full window, so border pixels of
    # small training crops get the same weight as interior ones
    r = SSIM_WINDOW // 2
    x = ops.pad_reflect(x, r, r, r, r)
    h, w = x.shape[-2:]
    y = ops.matmul(x, _gaussian_band(w))
    return ops.matmul(_gaussian_band(h).T, y)


def ssim_map(pred, target) -> Var:
    """Local SSIM per pixel: 11x11 Gaussian window (sigma 1.5), reflect padded, dynamic range 1."""
    _check_same(pred, target)
    x = pred if isinstance(pred, Var) else ops.const(pred)
    y = target if isinstance(target, Var) else ops.const(target)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs extents >= {SSIM_WINDOW}, got {x.shape[-2:]}")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x, mu_y = _blur(x), _blur(y)
    mu_xx, mu_yy, mu_xy = ops.mul(mu_x, mu_x), ops.mul(mu_y, mu_y), ops.mul(mu_x, mu_y)
    s_xx = ops.sub(_blur(ops.mul(x, x)), mu_xx)
    s_yy = ops.sub(_blur(ops.mul(y, y)), mu_yy)
    s_xy = ops.sub(_blur(ops.mul(x, y)), mu_xy)
    num = ops.mul(ops.add(ops.mul(mu_xy, 2.0), c1), ops.add(ops.mul(s_xy, 2.0), c2))
    den = ops.mul(ops.add(ops.add(mu_xx, mu_yy), c1), ops.add(ops.add(s_xx, s_yy), c2))
    return ops.div(num, den)


def ssim_loss(pred, target) -> Var:
    return ops.sub(1.0, ops.mean(ssim_map(pred, target)))


def overexposed_reg(pred, tau_over: float = 0.90) -> Var:
    """Mean over all elements of ``max(0, v - tau_over)**2``."""
    excess = ops.clamp_min(ops.sub(pred, tau_over), 0.0)
    return ops.mean(ops.square(excess))


class RandomFeatures:
    """Frozen two-layer random conv features standing in for a pretrained net."""

    def __init__(self, seed: int = 1234, channels: int = 8, in_channels: int = 3):
        rng = np.random.default_rng(seed)
        b1 = 1.0 / math.sqrt(in_channels * 9)
        b2 = 1.0 / math.sqrt(channels * 9)
        self.w1 = rng.uniform(-b1, b1, (channels, in_channels, 3, 3))
        self.w2 = rng.uniform(-b2, b2, (channels, channels, 3, 3))

    def __call__(self, x) -> Var:
        return ops.conv2d(ops.leaky_relu(ops.conv2d(x, self.w1, pad=1)), self.w2, pad=1)


_FEATURES = RandomFeatures()


def feature_proxy_loss(pred, target) -> Var:
    """Mean squared distance of random conv features (stands in for VGG)."""
    return ops.mean(ops.square(ops.sub(_FEATURES(pred), _FEATURES(target))))


def normalized_feature_proxy_loss(pred, target, eps: float = 1e-10) -> Var:
    """Channel-normalized variant of the feature distance (stands in for LPIPS)."""
    def unit(f):
        norm = ops.sqrt(ops.add(ops.sum(ops.square(f), axis=0, keepdims=True), eps))
        return ops.div(f, norm)
    fp, ft = unit(_FEATURES(pred)), unit(_FEATURES(target))
    return ops.mean(ops.sum(ops.square(ops.sub(fp, ft)), axis=0))


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 1.0
    w_ssim: float = 1.0
    w_vgg_proxy: float = 0.0
    w_lpips_proxy: float = 0.0
    lambda_over: float = 0.1
    tau_over: float = 0.90

    def __post_init__(self):
        ws = (self.w_l1, self.w_ssim, self.w_vgg_proxy, self.w_lpips_proxy, self.lambda_over)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")

    def items(self):
        return (("l1", self.w_l1), ("ssim", self.w_ssim), ("vgg_proxy", self.w_vgg_proxy),
                ("lpips_proxy", self.w_lpips_proxy), ("over", self.lambda_over))


TERMS = {
    "l1": l1_loss,
    "ssim": ssim_loss,
    "vgg_proxy": feature_proxy_loss,
    "lpips_proxy": normalized_feature_proxy_loss,
}


def total_loss(pred, target, lw: LossWeights = LossWeights()) -> tuple[Var, dict[str, float]]:
    """Weighted sum of the enabled terms and the raw value of each term.

    Terms with weight 0 are not evaluated and report 0.
    """
    total = None
    terms: dict[str, float] = {}
    for name, weight in lw.items():
        if weight == 0:
            terms[name] = 0.0
            continue
        if name == "over":
            term = overexposed_reg(pred, lw.tau_over)
        else:
            term = TERMS[name](pred, target)
        terms[name] = float(term.value)
        weighted = ops.mul(term, weight)
        total = weighted if total is None else ops.add(total, weighted)
    return total, terms


# -- optimizer and schedule ---------------------------------------------------

@dataclass
class RMSProp:
    """RMSProp with momentum on the normalized gradient and decoupled decay::

        v <- alpha*v + (1-alpha)*g^2
        m <- momentum*m + g/sqrt(v + eps)
        w <- w - lr*m - lr*weight_decay*w
    """

    lr: float = 1e-4
    alpha: float = 0.99
    momentum: float = 0.9
    weight_decay: float = 1e-7
    eps: float = 1e-8
    v: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)

    def step(self, weights: dict, grads: Mapping, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, w in weights.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(w)
            if g.shape != w.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
            v = self.v.get(name)
            v = (1.0 - self.alpha) * g * g if v is None else self.alpha * v + (1.0 - self.alpha) * g * g
            m = self.m.get(name)
            upd = g / np.sqrt(v + self.eps)
            m = upd if m is None else self.momentum * m + upd
            self.v[name] = v
            self.m[name] = m
            weights[name] = w - lr * m - lr * self.weight_decay * w


def rmsprop_step(state: RMSProp, grads: Mapping, weights: dict, lr: float | None = None) -> dict:
    state.step(weights, grads, lr)
    return weights


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-4
    warmup_epochs: int = 15
    total_epochs: int = 100
    final_lr: float = 1e-6

    def __post_init__(self):
        if self.base_lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")


def lr_at_epoch(s: Schedule, e: int) -> float:
    """Linear warm-up to ``base_lr`` at epoch ``warmup-1``, then cosine to ``final_lr``."""
    if not 0 <= e < s.total_epochs:
        raise ValueError(f"epoch {e} outside [0, {s.total_epochs})")
    if e < s.warmup_epochs:
        return s.base_lr * (e + 1) / s.warmup_epochs
    progress = (e - s.warmup_epochs + 1) / (s.total_epochs - s.warmup_epochs)
    return s.final_lr + 0.5 * (s.base_lr - s.final_lr) * (1.0 + math.cos(math.pi * progress))


# -- dynamic patch batches ----------------------------------------------------

class PatchBatch(NamedTuple):
    resolution: int
    pairs: list


def make_dynamic_batches(dataset: Sequence, resolutions: Sequence[int], batch_size: int,
                         seed: int, n_batches: int | None = None) -> Iterator[PatchBatch]:
    """Yield batches whose crop resolution is drawn uniformly per batch.

    ``dataset`` holds aligned ``(low, high)`` pairs of ``[C, H, W]`` arrays.
    Without ``n_batches`` one pass is made over a seeded permutation of the
    dataset; otherwise images are drawn with replacement.
    """
    if not resolutions:
        raise ValueError("resolutions must be non-empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    smallest = min(min(lo.shape[-2:]) for lo, _ in dataset)
    if max(resolutions) > smallest:
        raise ValueError(f"resolution {max(resolutions)} exceeds smallest image extent {smallest}")
    for lo, hi in dataset:
        if lo.shape != hi.shape:
            raise ShapeError("low/high pair shapes differ")
    rng = np.random.default_rng(seed)
    if n_batches is None:
        order = rng.permutation(len(dataset))
        groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    else:
        groups = [rng.integers(0, len(dataset), batch_size) for _ in range(n_batches)]
    for group in groups:
        res = int(resolutions[rng.integers(len(resolutions))])
        pairs = []
        for idx in group:
            lo, hi = dataset[int(idx)]
            top = int(rng.integers(0, lo.shape[-2] - res + 1))
            left = int(rng.integers(0, lo.shape[-1] - res + 1))
            window = (slice(None), slice(top, top + res), slice(left, left + res))
            pairs.append((lo[window].copy(), hi[window].copy()))
        yield PatchBatch(res, pairs)


# -- epoch loop ---------------------------------------------------------------

class EpochReport(NamedTuple):
    mean_loss: float
    terms: dict
    batches: int


def batch_loss(cfg: model.ModelConfig, leaves: Mapping, pairs, lw: LossWeights):
    total = None
    term_sums: dict[str, float] = {}
    for low, high in pairs:
        pred = model.forward(low, cfg, leaves)
        loss, terms = total_loss(pred, high, lw)
        total = loss if total is None else ops.add(total, loss)
        for k, v in terms.items():
            term_sums[k] = term_sums.get(k, 0.0) + v
    n = len(pairs)
    return ops.mul(total, 1.0 / n), {k: v / n for k, v in term_sums.items()}


def train_epoch(cfg: model.ModelConfig, weights: dict, optimizer: RMSProp,
                batches, lw: LossWeights, lr: float | None = None) -> EpochReport:
    """One pass: forward, loss, backward and an optimizer step per batch."""
    loss_sum = 0.0
    term_sums: dict[str, float] = {}
    n = 0
    for batch in batches:
        tape = Tape()
        leaves = model.leaves(tape, weights)
        loss, terms = batch_loss(cfg, leaves, batch.pairs, lw)
        value = float(loss.value)
        if not math.isfinite(value):
            bad = [k for k, v in terms.items() if not math.isfinite(v)]
            raise TrainingError(f"non-finite loss {value} (terms: {', '.join(bad) or 'combination'})")
        grads = tape.backward(loss)
        optimizer.step(weights, {k: grad_of(grads, v) for k, v in leaves.items()}, lr)
        loss_sum += value
        for k, v in terms.items():
            term_sums[k] = term_sums.get(k, 0.0) + v
        n += 1
    if n == 0:
        return EpochReport(0.0, {}, 0)
    return EpochReport(loss_sum / n, {k: v / n for k, v in term_sums.items()}, n)
