"""Inference-time scaling benchmark: model forward vs. naive self-attention."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import model


def attention_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray, block: int = 1024) -> np.ndarray:
    """``softmax(q k^T / sqrt(d)) v``, O(N^2) in the token count.

    Queries are processed in blocks so the N x N score matrix is never held
    at once; the arithmetic is unchanged.
    """
    scale = 1.0 / np.sqrt(q.shape[1])
    out = np.empty_like(v)
    for i in range(0, q.shape[0], block):
        s = (q[i:i + block] @ k.T) * scale
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[i:i + block] = s @ v
    return out


def naive_attention(tokens: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> np.ndarray:
    """Single-head self-attention layer with linear q/k/v projections."""
    return attention_kernel(tokens @ wq, tokens @ wk, tokens @ wv)


def _median_ms(fn, repeats: int, budget_s: float = 0.3) -> float:
    # fast calls get extra repeats so the median is not dominated by jitter
    t0 = time.perf_counter()
    fn()
    first = time.perf_counter() - t0
    repeats = max(repeats, min(200, int(budget_s / max(first, 1e-6))))
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


@dataclass
class BenchRow:
    resolution: int
    pixels: int
    model_ms: float
    attention_ms: float

    @property
    def ratio(self) -> float:
        return self.attention_ms / self.model_ms


def run(cfg: model.ModelConfig, resolutions=(64, 128, 256, 512), repeats: int = 5,
        seed: int = 0) -> list[BenchRow]:
    """Time both paths at each resolution.

    The attention layer sees the same token count and width as the scan at
    full resolution: one token per ``patch x patch`` tile with
    ``base_channel * patch**2`` features.  Only the quadratic kernel is
    timed; the q/k/v projections are per-token work shared with the scan.
    """
    rng = np.random.default_rng(seed)
    weights = model.init_weights(cfg, seed)
    width = cfg.base_channel * cfg.patch ** 2
    wq, wk, wv = (rng.normal(0, width ** -0.5, (width, width)) for _ in range(3))
    rows = []
    for res in resolutions:
        x = rng.uniform(0, 1, (cfg.in_channels, res, res))
        tokens = rng.normal(size=((res // cfg.patch) ** 2, width))
        q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
        model_ms = _median_ms(lambda: model.infer(x, cfg, weights), repeats)
        attn_ms = _median_ms(lambda: attention_kernel(q, k, v), repeats)
        rows.append(BenchRow(res, res * res, model_ms, attn_ms))
    return rows
