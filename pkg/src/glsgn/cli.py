"""Command-line entry point wiring all modules into reproducible workflows.

Subcommands: synth, train, eval, restore, ablate, gradcheck.  Exit codes:
0 success, 1 domain failure, 2 usage error.  GLSGN_THREADS caps synthesis
worker threads (0, the default, is fully single-threaded).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, GlsgnConfig, TrainRun, VARIANTS
from .degradations import KINDS, SynthRanges, generate_dataset
from .gradcheck import run_suite
from .imaging import Image, ImageError, load_image, resize_image, save_image
from .model import GlsgnModel, ablation_variant
from .training import TrainingError, build_from_checkpoint, evaluate, restore_image, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_IMAGE_SUFFIXES = (".ppm", ".png")


class CliError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("GLSGN_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"GLSGN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError(f"GLSGN_THREADS must be >= 0, got {n}")
    return n


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h_s, w_s = text.lower().split("x")
        return int(h_s), int(w_s)
    except ValueError:
        raise CliError(f"--size must look like 64x64, got {text!r}") from None


def load_cli_config(path: str | None) -> tuple[GlsgnConfig, TrainRun, SynthRanges]:
    """Read the JSON config file; every section and field is optional."""
    if path is None:
        return GlsgnConfig(), TrainRun(), SynthRanges()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError(f"config {path}: top level must be an object")
    unknown = set(raw) - {"model", "train", "synthesis"}
    if unknown:
        raise CliError(f"config {path}: unknown section(s) {sorted(unknown)}")
    model = GlsgnConfig.from_dict(raw.get("model", {}))
    run = TrainRun.from_dict(raw.get("train", {}))
    ranges = SynthRanges.from_dict(raw.get("synthesis", {}))
    return model, run, ranges


def dump_cli_config(model: GlsgnConfig, run: TrainRun, ranges: SynthRanges) -> str:
    return json.dumps({"model": model.to_dict(), "train": run.to_dict(),
                       "synthesis": ranges.to_dict()}, indent=2, sort_keys=True)


def _json_num(v: float):
    return v if math.isfinite(v) else "inf"


def _write_report(path: Path, rows: list[dict], summary: dict) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
        f.write(json.dumps(summary, sort_keys=True) + "\n")


def _load_backgrounds(bg_dir: str, size: tuple[int, int]) -> list[Image]:
    root = Path(bg_dir)
    if not root.is_dir():
        raise CliError(f"--bg-dir {bg_dir} is not a directory")
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not paths:
        raise CliError(f"no background images (*.ppm, *.png) found in {bg_dir}")
    return [resize_image(load_image(p), size[0], size[1]) for p in paths]


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    model_cfg, _, ranges = load_cli_config(args.config)
    del model_cfg
    size = _parse_size(args.size)
    backgrounds = _load_backgrounds(args.bg_dir, size) if args.count > 0 else \
        _load_backgrounds(args.bg_dir, size)
    train_p, test_p = generate_dataset(
        args.out_dir, args.task, backgrounds, count=args.count, seed=args.seed,
        ranges=ranges, train_fraction=args.train_fraction, threads=_threads())
    print(f"wrote {args.count} {args.task} pairs under {args.out_dir}")
    print(f"manifests: {train_p} {test_p}")
    return EXIT_OK


def _model_for_training(args) -> tuple[GlsgnModel, TrainRun]:
    model_cfg, run, _ = load_cli_config(args.config)
    if args.steps is not None:
        run = replace(run, steps=args.steps)
    if args.seed is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        run = replace(run, seed=args.seed)
    if (run.crop_h, run.crop_w) != (model_cfg.input_h, model_cfg.input_w):
        raise CliError(
            f"train crop {run.crop_h}x{run.crop_w} must equal model input "
            f"{model_cfg.input_h}x{model_cfg.input_w}")
    return GlsgnModel(model_cfg), run


def cmd_train(args) -> int:
    model, run = _model_for_training(args)
    manifest = Path(args.data) / args.manifest
    ckpt_path, log_path = train(model, args.data, manifest, run, args.out,
                                quiet=args.quiet)
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return EXIT_OK


def _eval_and_report(model: GlsgnModel, data: str, manifest: Path, report_path: Path,
                     tag: dict | None = None) -> None:
    report = evaluate(model, data, manifest)
    tag = tag or {}
    rows = [dict(tag, index=r.index, input=r.input_path,
                 psnr=_json_num(r.psnr), ssim=r.ssim,
                 baseline_psnr=_json_num(r.baseline_psnr), baseline_ssim=r.baseline_ssim)
            for r in report.rows]
    summary = dict(tag, mean_psnr=_json_num(report.mean_psnr), mean_ssim=report.mean_ssim,
                   mean_baseline_psnr=_json_num(report.mean_baseline_psnr),
                   mean_baseline_ssim=report.mean_baseline_ssim,
                   samples=len(report.rows))
    _write_report(report_path, rows, summary)
    print(f"mean PSNR {report.mean_psnr:.4f} dB (baseline {report.mean_baseline_psnr:.4f})")
    print(f"mean SSIM {report.mean_ssim:.4f} (baseline {report.mean_baseline_ssim:.4f})")
    print(f"report: {report_path}")


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, _ = build_from_checkpoint(ckpt)
    manifest = Path(args.data) / args.manifest
    report_path = Path(args.report) if args.report else Path(args.checkpoint).parent / "eval_report.jsonl"
    _eval_and_report(model, args.data, manifest, report_path)
    return EXIT_OK


def cmd_restore(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, _ = build_from_checkpoint(ckpt)
    cfg = model.config
    img = load_image(args.input)
    th, tw = cfg.input_h, cfg.input_w
    if img.height < th or img.width < tw:
        raise CliError(f"input {img.height}x{img.width} smaller than model size {th}x{tw}")
    if (img.height, img.width) == (th, tw):
        out = restore_image(model, img)
    else:
        # non-overlapping model-sized tiles; edge tiles anchor to the far border
        canvas = np.zeros_like(img.data)
        ys = list(range(0, img.height - th + 1, th))
        if ys[-1] != img.height - th:
            ys.append(img.height - th)
        xs = list(range(0, img.width - tw + 1, tw))
        if xs[-1] != img.width - tw:
            xs.append(img.width - tw)
        for y0 in ys:
            for x0 in xs:
                tile = Image(img.data[y0:y0 + th, x0:x0 + tw])
                canvas[y0:y0 + th, x0:x0 + tw] = restore_image(model, tile).data
        out = Image(canvas)
    save_image(out, args.output)
    print(f"restored {args.input} -> {args.output}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    model_cfg, run, _ = load_cli_config(args.config)
    if args.steps is not None:
        run = replace(run, steps=args.steps)
    if args.seed is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        run = replace(run, seed=args.seed)
    model = ablation_variant(model_cfg, args.variant)
    if (run.crop_h, run.crop_w) != (model_cfg.input_h, model_cfg.input_w):
        raise CliError("train crop must equal model input size")
    out = Path(args.out) / args.variant.replace("+", "plus_")
    manifest = Path(args.data) / args.manifest
    ckpt_path, log_path = train(model, args.data, manifest, run, out, quiet=args.quiet)
    test_manifest = Path(args.data) / "manifest_test.txt"
    report_path = out / "ablate_report.jsonl"
    _eval_and_report(model, args.data, test_manifest, report_path,
                     tag={"variant": args.variant})
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, tolerance=args.tolerance, sabotage=args.sabotage)
    width = max(len(r.op) for r in results)
    failures = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.op:<{width}}  max rel err {r.max_rel_err:12.3e}  {status}")
        if not r.passed:
            failures.append(r.op)
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}")
        return EXIT_FAILURE
    print(f"all {len(results)} ops within tolerance {args.tolerance:g}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="glsgn",
        description="Global-local stepwise restoration: synthesize data, train, "
                    "evaluate, restore, ablate, gradcheck.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize degraded/clean training pairs")
    sp.add_argument("--task", required=True, choices=KINDS)
    sp.add_argument("--bg-dir", required=True, help="directory of background images")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", default="64x64", help="sample size HxW")
    sp.add_argument("--train-fraction", type=float, default=0.875)
    sp.add_argument("--config", default=None, help="JSON config (synthesis ranges)")
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train the full model")
    tp.add_argument("--config", default=None, help="JSON config file")
    tp.add_argument("--data", required=True, help="dataset directory")
    tp.add_argument("--manifest", default="manifest_train.txt")
    tp.add_argument("--out", required=True, help="output directory")
    tp.add_argument("--steps", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--quiet", action="store_true")
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--manifest", default="manifest_test.txt")
    ep.add_argument("--report", default=None, help="report path (JSONL)")
    ep.set_defaults(fn=cmd_eval)

    rp = sub.add_parser("restore", help="restore one degraded image")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--input", required=True)
    rp.add_argument("--output", required=True)
    rp.set_defaults(fn=cmd_restore)

    ap = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    ap.add_argument("--variant", required=True, choices=VARIANTS)
    ap.add_argument("--config", default=None)
    ap.add_argument("--data", required=True)
    ap.add_argument("--manifest", default="manifest_train.txt")
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--quiet", action="store_true")
    ap.set_defaults(fn=cmd_ablate)

    gp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--tolerance", type=float, default=1e-4)
    gp.add_argument("--sabotage", default=None, help=argparse.SUPPRESS)
    gp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, CheckpointError, TrainingError, ImageError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
