"""Plain-text ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from . import model
from .evaluate import DynamicAdjustParams
from .training import LossWeights, Schedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    lr: float = 1e-4
    warmup_epochs: int = 15
    final_lr: float = 1e-6
    epochs: int = 1
    seed: int = 0
    resolutions: tuple[int, ...] = (16, 32, 48)
    batch_size: int = 1
    batches_per_epoch: int = 0          # 0: one pass over the dataset
    checkpoint_every: int = 0           # 0: final checkpoint only
    w_l1: float = 1.0
    w_ssim: float = 1.0
    w_vgg_proxy: float = 0.0
    w_lpips_proxy: float = 0.0
    lambda_over: float = 0.1
    tau_over: float = 0.90
    da_strength: float = 1.0
    da_normalized_value: float = 0.5
    da_per_channel: bool = True
    tile: int = 0                       # 0: whole image in one pass
    overlap: int = 16
    data_low_dir: str = ""
    data_high_dir: str = ""
    out_dir: str = "out"
    checkpoint: str = ""                # default: <out_dir>/model.xpmb

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_l1, self.w_ssim, self.w_vgg_proxy, self.w_lpips_proxy,
                           self.lambda_over, self.tau_over)

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.warmup_epochs, max(self.epochs, 1), self.final_lr)

    @property
    def da_params(self) -> DynamicAdjustParams:
        return DynamicAdjustParams(self.da_strength, self.da_normalized_value, self.da_per_channel)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.xpmb"


MODEL_KEYS = {f.name: f.type for f in fields(model.ModelConfig)}
RUN_KEYS = {f.name: f.type for f in fields(RunConfig) if f.name != "model"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, kind, text: str):
    kind = str(kind)
    if "bool" in kind:
        return _parse_bool(text)
    if "tuple" in kind:
        items = [t for t in text.replace(",", " ").split() if t]
        if not items:
            raise ValueError("empty list")
        return tuple(int(t) for t in items)
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text.strip()


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def build(raw: Mapping[str, str]) -> RunConfig:
    """Typed :class:`RunConfig` from string values; unknown keys are rejected."""
    unknown = sorted(set(raw) - set(MODEL_KEYS) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    model_kw, run_kw = {}, {}
    for key, text in raw.items():
        kind = MODEL_KEYS.get(key) or RUN_KEYS[key]
        try:
            value = _convert(key, kind, text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        (model_kw if key in MODEL_KEYS else run_kw)[key] = value
    try:
        cfg = RunConfig(model=model.ModelConfig(**model_kw), **run_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if any(r < 11 for r in cfg.resolutions):
        raise ConfigError("every training resolution must be >= 11 (SSIM window)")
    if cfg.tile and cfg.tile <= 2 * cfg.overlap:
        raise ConfigError("tile must exceed 2 * overlap")
    try:
        cfg.loss_weights
        cfg.da_params
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.lr <= 0 or cfg.final_lr <= 0 or cfg.warmup_epochs < 1:
        raise ConfigError("lr and final_lr must be positive and warmup_epochs >= 1")


def load(path=None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional) and apply ``overrides``, which take precedence."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        raw.update(parse_lines(p.read_text(encoding="utf-8"), str(p)))
    raw.update(overrides or {})
    return build(raw)


def replace(cfg: RunConfig, **changes) -> RunConfig:
    out = dataclasses.replace(cfg, **changes)
    validate(out)
    return out


def dump(cfg: RunConfig) -> str:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.model.to_dict().items()]
    for k in RUN_KEYS:
        v = getattr(cfg, k)
        if isinstance(v, tuple):
            v = ", ".join(map(str, v))
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
