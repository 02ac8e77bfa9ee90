"""Image-quality metrics, inference-time brightness adjustment, tiled inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import model, training
from .ndtensor import ShapeError, median_lower

PSNR_CAP = 99.0
GUARD = 1e-6


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    pred, target = _pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim_metric(pred, target) -> float:
    pred, target = _pair(pred, target)
    return 1.0 - float(training.ssim_loss(pred, target).value)


def mae(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(training.l1_loss(pred, target).value)


# -- brightness adjustment ----------------------------------------------------

@dataclass(frozen=True)
class DynamicAdjustParams:
    strength: float = 1.0
    normalized_value: float = 0.5
    per_channel: bool = True

    def __post_init__(self):
        if not math.isfinite(self.strength) or self.strength < 0:
            raise ValueError(f"strength must be finite and >= 0, got {self.strength}")
        if not 0.0 <= self.normalized_value <= 1.0:
            raise ValueError(f"normalized_value must lie in [0, 1], got {self.normalized_value}")


def adjustment_factors(img, p: DynamicAdjustParams = DynamicAdjustParams()) -> np.ndarray:
    """``(median + strength * (normalized_value - mean)) / median`` per channel.

    Channels (or the whole image when ``per_channel`` is off) whose median
    is below 1e-6 get factor 1.  Returns shape ``[C, 1, 1]``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected [C, H, W], got {img.shape}")
    if p.per_channel:
        med = median_lower(img, axis=(1, 2))
        mean = img.mean(axis=(1, 2))
    else:
        med = np.full(img.shape[0], median_lower(img))
        mean = np.full(img.shape[0], img.mean())
    factor = np.ones(img.shape[0])
    ok = med >= GUARD
    factor[ok] = (med[ok] + p.strength * (p.normalized_value - mean[ok])) / med[ok]
    return factor.reshape(-1, 1, 1)


def dynamic_adjustment(img, p: DynamicAdjustParams = DynamicAdjustParams(), clamp: bool = True) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    out = img * adjustment_factors(img, p)
    return np.clip(out, 0.0, 1.0) if clamp else out


def gt_mean_adjust(pred, reference, clamp: bool = True) -> np.ndarray:
    """Rescale each channel of ``pred`` to the mean of ``reference``.

    Uses the ground truth, so results must be reported as "gt-mean".
    """
    pred, reference = _pair(pred, reference)
    pm = pred.mean(axis=(1, 2))
    factor = np.ones_like(pm)
    ok = pm >= GUARD
    factor[ok] = reference.mean(axis=(1, 2))[ok] / pm[ok]
    out = pred * factor.reshape(-1, 1, 1)
    return np.clip(out, 0.0, 1.0) if clamp else out


# -- inference ------------------------------------------------------------------

def _ramp(n: int, overlap: int, first: bool, last: bool) -> np.ndarray:
    w = np.ones(n)
    if overlap:
        up = np.arange(1, overlap + 1) / (overlap + 1)
        if not first:
            w[:overlap] = up
        if not last:
            w[n - overlap:] = up[::-1]
    return w


def _starts(n: int, tile: int, overlap: int) -> list[int]:
    if n <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def enhance_full_image(fn: Callable[[np.ndarray], np.ndarray], img, tile: int = 256,
                       overlap: int = 16) -> np.ndarray:
    """Run ``fn`` on overlapping tiles and blend them with linear ramps.

    ``fn`` maps a ``[C, h, w]`` tile to an array of the same shape (for
    example ``lambda t: model.infer(t, cfg, weights)``).  Images no larger
    than ``tile`` in both extents take a single direct pass.
    """
    img = np.asarray(img, dtype=np.float64)
    if tile <= 2 * overlap or overlap < 0:
        raise ValueError(f"need tile > 2 * overlap >= 0, got tile={tile}, overlap={overlap}")
    _, h, w = img.shape
    if h <= tile and w <= tile:
        return fn(img)
    acc = np.zeros_like(img)
    norm = np.zeros((h, w))
    ys, xs = _starts(h, tile, overlap), _starts(w, tile, overlap)
    for y in ys:
        th = min(tile, h)
        wy = _ramp(th, overlap, y == 0, y + th == h)
        for x in xs:
            tw = min(tile, w)
            wx = _ramp(tw, overlap, x == 0, x + tw == w)
            out = fn(img[:, y:y + th, x:x + tw])
            weight = np.outer(wy, wx)
            acc[:, y:y + th, x:x + tw] += out * weight
            norm[y:y + th, x:x + tw] += weight
    return acc / norm


def enhance(img, cfg: model.ModelConfig, weights: Mapping, tile: int | None = None,
            overlap: int = 16, da: DynamicAdjustParams | None = None) -> np.ndarray:
    """Model output, optionally tiled, with dynamic adjustment applied last.

    Adjustment runs when ``da`` is given or ``cfg.use_da`` is set (then with
    default parameters); it acts on the final output, after the HDR layer.
    """
    def fn(t):
        return model.infer(t, cfg, weights)
    out = fn(np.asarray(img, dtype=np.float64)) if tile is None else enhance_full_image(fn, img, tile, overlap)
    if da is None and cfg.use_da:
        da = DynamicAdjustParams()
    if da is not None:
        out = dynamic_adjustment(out, da)
    return out


# -- reports ----------------------------------------------------------------------

@dataclass
class MetricRow:
    image_id: str
    psnr: float
    ssim: float
    mae: float
    adjusted: bool = False
    gt_mean: bool = False


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, image_id: str, pred, target, adjusted: bool = False, gt_mean: bool = False) -> MetricRow:
        row = MetricRow(image_id, psnr(pred, target), ssim_metric(pred, target), mae(pred, target),
                        adjusted, gt_mean)
        self.rows.append(row)
        return row

    def aggregate(self) -> MetricRow:
        if not self.rows:
            raise ValueError("empty report")
        n = len(self.rows)
        return MetricRow(
            "mean",
            math.fsum(r.psnr for r in self.rows) / n,
            math.fsum(r.ssim for r in self.rows) / n,
            math.fsum(r.mae for r in self.rows) / n,
            all(r.adjusted for r in self.rows),
            all(r.gt_mean for r in self.rows),
        )

    HEADER = ("image-id", "psnr", "ssim", "mae", "adjusted", "gt-mean")

    def csv_rows(self) -> list[list[str]]:
        """Header, one row per image, then the aggregate; PSNR capped for text."""
        out = [list(self.HEADER)]
        for r in self.rows + [self.aggregate()]:
            out.append([r.image_id, f"{min(r.psnr, PSNR_CAP):.6f}", f"{r.ssim:.6f}", f"{r.mae:.6f}",
                        str(r.adjusted).lower(), str(r.gt_mean).lower()])
        return out
