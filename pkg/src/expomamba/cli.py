"""Command-line entry point: train, enhance, eval, bench, inspect-fft."""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench, checkpoint, config, evaluate, model, spectral, training
from .imageio import IMAGE_SUFFIXES, atomic_write, read_image, write_image


class CliError(RuntimeError):
    pass


def _csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode("utf-8")


def _images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_pairs(low_dir, high_dir) -> list[tuple[str, Path, Path]]:
    """Match ``low/`` and ``high/`` files by name; every file must have a partner."""
    low_dir, high_dir = Path(low_dir), Path(high_dir)
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise CliError(f"data directory not found: {d}")
    low = {p.name: p for p in _images(low_dir)}
    high = {p.name: p for p in _images(high_dir)}
    unpaired = sorted(set(low) ^ set(high))
    if unpaired:
        raise CliError("unpaired files: " + ", ".join(
            f"{n} (missing in {'high' if n in low else 'low'})" for n in unpaired))
    if not low:
        raise CliError(f"no images in {low_dir}")
    return [(n, low[n], high[n]) for n in sorted(low)]


# -- commands -------------------------------------------------------------------

def cmd_train(cfg: config.RunConfig, log=print) -> int:
    pairs = load_pairs(cfg.data_low_dir, cfg.data_high_dir)
    dataset = []
    for name, lo, hi in pairs:
        a, b = read_image(lo), read_image(hi)
        if a.shape != b.shape:
            raise CliError(f"{name}: low {a.shape} and high {b.shape} differ in size")
        dataset.append((a, b))
    smallest = min(min(a.shape[1:]) for a, _ in dataset)
    if max(cfg.resolutions) > smallest:
        raise CliError(f"resolution {max(cfg.resolutions)} exceeds smallest image extent {smallest}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = model.init_weights(cfg.model, cfg.seed)
    opt = training.RMSProp(lr=cfg.lr)
    lw = cfg.loss_weights
    rows = [["epoch", "lr", "total", "l1", "ssim", "over", "wall-ms"]]
    report = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = training.lr_at_epoch(cfg.schedule, epoch)
        batches = training.make_dynamic_batches(
            dataset, cfg.resolutions, cfg.batch_size, cfg.seed * 1_000_003 + epoch,
            cfg.batches_per_epoch or None)
        report = training.train_epoch(cfg.model, weights, opt, batches, lw, lr)
        ms = (time.perf_counter() - t0) * 1e3
        t = report.terms
        rows.append([epoch, f"{lr:.9g}", f"{report.mean_loss:.9g}", f"{t['l1']:.9g}",
                     f"{t['ssim']:.9g}", f"{t['over']:.9g}", f"{ms:.1f}"])
        atomic_write(out_dir / "train_log.csv", _csv_bytes(rows))
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
            checkpoint.save_checkpoint(out_dir / f"epoch{epoch + 1:04d}.xpmb", cfg.model, weights)
    checkpoint.save_checkpoint(cfg.checkpoint_path, cfg.model, weights)
    if cfg.epochs == 0:
        atomic_write(out_dir / "train_log.csv", _csv_bytes(rows))
    if report is not None:
        terms = ", ".join(f"{k}={v:.6g}" for k, v in report.terms.items())
        log(f"final loss {report.mean_loss:.6g} ({terms})")
    log(f"checkpoint written to {cfg.checkpoint_path}")
    return 0


def _load_model(cfg: config.RunConfig):
    path = cfg.checkpoint_path
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    _, weights = checkpoint.load_checkpoint(path, cfg.model)
    return weights


def _predict(cfg: config.RunConfig, weights, img, da) -> np.ndarray:
    return evaluate.enhance(img, cfg.model, weights, tile=cfg.tile or None,
                            overlap=cfg.overlap, da=da)


def cmd_enhance(cfg: config.RunConfig, inputs: Sequence, da: bool = False,
                gt_mean: str | None = None, log=print) -> int:
    if not inputs:
        raise CliError("enhance needs at least one input image")
    paths = [Path(p) for p in inputs]
    for p in paths:
        if not p.is_file():
            raise CliError(f"input not found: {p}")
    names = [p.name for p in paths]
    if len(set(names)) != len(names):
        raise CliError("input file names must be unique")
    ref = read_image(gt_mean) if gt_mean else None
    weights = _load_model(cfg)
    out_dir = Path(cfg.out_dir)
    for p in paths:
        img = read_image(p)
        out = _predict(cfg, weights, img, cfg.da_params if da else None)
        if ref is not None:
            out = evaluate.gt_mean_adjust(out, ref)
        dest = out_dir / p.name
        write_image(out, dest)
        log(f"{p} -> {dest}")
    return 0


def cmd_eval(cfg: config.RunConfig, da: bool = False, gt_mean: bool = False,
             pred_dir: str | None = None, log=print) -> int:
    """Score predictions against ``data_high_dir``.

    Predictions come from ``pred_dir`` (matched by name) when given,
    otherwise from running the checkpoint on ``data_low_dir``.
    """
    pairs = load_pairs(cfg.data_low_dir, cfg.data_high_dir)
    weights = None if pred_dir else _load_model(cfg)
    report = evaluate.MetricReport()
    for name, lo, hi in pairs:
        target = read_image(hi)
        if pred_dir:
            src = Path(pred_dir) / name
            if not src.is_file():
                raise CliError(f"prediction missing for {name} in {pred_dir}")
            pred = read_image(src)
            if da:
                pred = evaluate.dynamic_adjustment(pred, cfg.da_params)
        else:
            pred = _predict(cfg, weights, read_image(lo), cfg.da_params if da else None)
        if gt_mean:
            pred = evaluate.gt_mean_adjust(pred, target)
        report.add(name, pred, target, adjusted=da, gt_mean=gt_mean)
    rows = report.csv_rows()
    out = Path(cfg.out_dir) / "eval.csv"
    atomic_write(out, _csv_bytes(rows))
    width = max(len(r[0]) for r in rows)
    for r in rows:
        log("  ".join([r[0].ljust(width)] + [c.rjust(10) for c in r[1:]]))
    log(f"report written to {out}")
    return 0


def cmd_bench(cfg: config.RunConfig, resolutions=(64, 128, 256, 512), repeats: int = 5,
              log=print) -> int:
    rows = bench.run(cfg.model, resolutions, repeats, cfg.seed)
    table = [["resolution", "pixels", "model-ms", "attention-ms", "ratio"]]
    for r in rows:
        table.append([r.resolution, r.pixels, f"{r.model_ms:.3f}", f"{r.attention_ms:.3f}", f"{r.ratio:.4f}"])
    atomic_write(Path(cfg.out_dir) / "bench.csv", _csv_bytes(table))
    for r in table:
        log(",".join(map(str, r)))
    return 0


_PHASE_FLOOR = 1e-9


def _spectrum(img: np.ndarray):
    h, w = img.shape[1:]
    f = spectral.fft2(spectral.pad_pow2(img))
    return f, (h, w)


def cmd_inspect_fft(inputs: Sequence, out_dir, log=print) -> int:
    """Write log-amplitude and phase planes per channel; swap A/B spectra for two inputs."""
    if len(inputs) not in (1, 2):
        raise CliError("inspect-fft takes one or two images")
    out_dir = Path(out_dir)
    imgs = [read_image(p) for p in inputs]
    stems = [Path(p).stem for p in inputs]
    if len(stems) == 2 and stems[0] == stems[1]:
        stems = [f"{stems[0]}_A", f"{stems[1]}_B"]
    specs = []
    for img, stem in zip(imgs, stems):
        f, size = _spectrum(img)
        ap = spectral.split_amp_phase(f)
        specs.append((ap, size))
        log_amp = np.log1p(spectral.fftshift2(ap.amplitude))
        # the phase of round-off noise is arbitrary; show it as zero
        floor = _PHASE_FLOOR * ap.amplitude.max(axis=(1, 2), keepdims=True)
        shown = np.where(ap.amplitude <= floor, 0.0, ap.phase)
        phase = (spectral.fftshift2(shown) + np.pi) / (2 * np.pi)
        for c in range(img.shape[0]):
            peak = log_amp[c].max()
            amp_plane = log_amp[c] / peak if peak > 0 else log_amp[c]
            write_image(np.repeat(amp_plane[None], 3, axis=0), out_dir / f"{stem}_amp_c{c}.ppm")
            write_image(np.repeat(phase[c][None], 3, axis=0), out_dir / f"{stem}_phase_c{c}.ppm")
    if len(imgs) == 2:
        (ap_a, size_a), (ap_b, size_b) = specs
        if ap_a.amplitude.shape != ap_b.amplitude.shape:
            raise CliError("swap needs images of equal padded size")
        for (amp, phase, size), tag in (((ap_a.amplitude, ap_b.phase, size_a), "ampA_phaseB"),
                                        ((ap_b.amplitude, ap_a.phase, size_b), "ampB_phaseA")):
            rec = spectral.ifft2_complex(spectral.merge_amp_phase(spectral.AmpPhase(amp, phase))).real
            rec = rec[:, :size[0], :size[1]]
            write_image(np.clip(rec, 0.0, 1.0), out_dir / f"swap_{tag}.ppm")
    log(f"spectra written to {out_dir}")
    return 0


# -- argument parsing ---------------------------------------------------------------

def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.out is not None:
        out["out_dir"] = args.out
    for key in ("da_strength", "tile", "overlap", "epochs", "checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = str(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expomamba", description="Low-light image enhancement with frequency state-space blocks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint path")
        return p

    p = common(sub.add_parser("train", help="train on paired low/high directories"))
    p.add_argument("--epochs", type=int)

    for name, helptext in (("enhance", "enhance images"), ("eval", "score against ground truth")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--da", action="store_true", help="apply dynamic brightness adjustment")
        p.add_argument("--da-strength", dest="da_strength", type=float)
        p.add_argument("--tile", type=int)
        p.add_argument("--overlap", type=int)
        if name == "enhance":
            p.add_argument("inputs", nargs="+")
            p.add_argument("--gt-mean", dest="gt_mean", metavar="REF", help="rescale to the channel means of REF")
        else:
            p.add_argument("--gt-mean", dest="gt_mean", action="store_true",
                           help="rescale predictions to the ground-truth means (tagged gt-mean)")
            p.add_argument("--pred-dir", dest="pred_dir", help="score existing predictions instead of running the model")

    p = common(sub.add_parser("bench", help="time model forward against naive attention"))
    p.add_argument("--resolutions", default="64,128,256,512")
    p.add_argument("--repeats", type=int, default=5)

    p = common(sub.add_parser("inspect-fft", help="write amplitude/phase planes"))
    p.add_argument("inputs", nargs="+")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config.load(args.config, _overrides(args))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "enhance":
            return cmd_enhance(cfg, args.inputs, da=args.da, gt_mean=args.gt_mean)
        if args.command == "eval":
            return cmd_eval(cfg, da=args.da, gt_mean=args.gt_mean, pred_dir=args.pred_dir)
        if args.command == "bench":
            res = tuple(int(r) for r in args.resolutions.split(","))
            return cmd_bench(cfg, res, args.repeats)
        return cmd_inspect_fft(args.inputs, cfg.out_dir)
    except (CliError, config.ConfigError, checkpoint.CheckpointError, training.TrainingError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
