"""Command-line entry point: ``wmdenoise {train,embed,extract,sweep,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default output directory is ``$WMDENOISE_OUTPUT_DIR`` (else ``runs``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import experiments as ex
from .checkpoint import CheckpointError
from .imaging import list_images, load_images, read_image, residual_visual, save_image
from .models import hard_threshold
from .noise import NoiseKind, NoiseSpec
from .training import (
    ConfigError,
    coerce_value,
    embed,
    evaluate,
    extract_scores,
    load_checkpoint,
    load_config,
    pool_bar,
    split_dataset,
    train_loop,
)

log = logging.getLogger("wmdenoise")

OUTPUT_ENV = "WMDENOISE_OUTPUT_DIR"
SCORE_FLOOR = 1e-6


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or "runs")


def _check_dir(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {p}")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got '{item}'")
        out[key.strip()] = coerce_value(key.strip(), value)
    for key in ("steps", "seed", "batch_size", "image_size", "message_length", "data_dir",
                "holdout_dir", "noise_pool", "checkpoint_interval"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "no_se", False):
        out["use_se"] = False
    if getattr(args, "no_denoiser", False):
        out["use_denoiser"] = False
    return out


def _config(args, out_dir: Path):
    overrides = _overrides(args)
    overrides.setdefault("out_dir", str(out_dir))
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


def _parse_message(text: str, length: int) -> np.ndarray:
    text = text.strip().lower()
    if text.startswith("0x"):
        digits = text[2:]
        try:
            bits = "".join(f"{int(ch, 16):04b}" for ch in digits)
        except ValueError:
            raise UsageError(f"message '{text}' is not valid hex") from None
    else:
        bits = text
        if set(bits) - {"0", "1"}:
            raise UsageError(f"message '{text}' must be a 0/1 string or 0x-prefixed hex")
    if len(bits) != length:
        raise UsageError(f"message has {len(bits)} bits but the checkpoint expects {length}")
    return np.array([[int(b) for b in bits]], dtype=np.float32)


def _load_single(path: str, size: int) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"image not found: {p}")
    img = read_image(p)
    if img.shape[1:] != (size, size):
        raise UsageError(f"{p} is {img.shape[2]}x{img.shape[1]} but the checkpoint expects "
                         f"{size}x{size}; resize it first (e.g. with any image tool)")
    return img[None].astype(np.float32)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args, Path(args.out_dir) if args.out_dir else default_output_dir() / "train")
    _check_dir(cfg.data_dir, "data directory")
    if cfg.holdout_dir:
        _check_dir(cfg.holdout_dir, "holdout directory")
    train, holdout = split_dataset(cfg)
    log.info("training on %d images, %d held out, %d steps", len(train), len(holdout), cfg.steps)
    result = train_loop(cfg, images=train, resume=args.resume, progress_every=args.progress)
    model = result.state.model
    ident = evaluate(model, holdout, [NoiseSpec(NoiseKind.IDENTITY)], seed=cfg.seed)["identity"]
    pool_mean, _ = pool_bar(model, holdout, cfg.pool(), seed=cfg.seed)
    print(f"checkpoint  {result.final_checkpoint}")
    print(f"metrics     {result.metrics_path}")
    print(f"held-out    n={len(holdout)}  PSNR {ident['psnr']:.2f} dB  SSIM {ident['ssim']:.4f}  "
          f"BAR(identity) {ident['bar']:.4f}  BAR(pool) {pool_mean:.4f}")
    return 0


def cmd_embed(args) -> int:
    state = load_checkpoint(args.checkpoint)
    mc = state.model.cfg
    cover = _load_single(args.image, mc.image_size)
    message = _parse_message(args.message, mc.message_length)
    encoded = embed(state.model, cover, message)
    out = Path(args.out)
    residual = Path(args.residual) if args.residual else out.with_name(out.stem + "_residual.png")
    save_image(encoded[0], out)
    save_image(residual_visual(cover[0], encoded[0], gain=args.gain), residual)
    print(f"encoded   {out}")
    print(f"residual  {residual}")
    return 0


def cmd_extract(args) -> int:
    state = load_checkpoint(args.checkpoint)
    mc = state.model.cfg
    img = _load_single(args.image, mc.image_size)
    scores = extract_scores(state.model, img)[0].astype(np.float64)
    bits = hard_threshold(scores)
    shown = np.clip(scores, SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    print("bits   " + "".join(str(b) for b in bits))
    print("scores " + " ".join(f"{s:.6f}" for s in shown))
    return 0


def cmd_sweep(args) -> int:
    state = load_checkpoint(args.checkpoint)
    images_dir = _check_dir(args.images, "images directory")
    if not list_images(images_dir):
        raise UsageError(f"no .png/.ppm images in {images_dir}")
    size = state.model.cfg.image_size
    images = load_images(images_dir, size, size)
    try:
        kind = NoiseKind(args.kind)
    except ValueError:
        raise UsageError(f"unknown noise kind '{args.kind}'") from None
    grid = ex.default_grid(kind, _floats(args.intensities) if args.intensities else None)
    try:
        sweep = ex.SweepSpec(kind, grid, str(images_dir), args.checkpoint, args.messages_per_image, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = ex.run_sweep(state.model, images, sweep)
    if args.include_identity and kind is not NoiseKind.IDENTITY:
        base = ex.SweepSpec(NoiseKind.IDENTITY, [0.0], messages_per_image=args.messages_per_image, seed=args.seed)
        rows = ex.run_sweep(state.model, images, base) + rows
    out = Path(args.out) if args.out else default_output_dir() / f"sweep_{kind.value}.csv"
    ex.write_csv(out, ex.SWEEP_COLUMNS, rows)
    for r in rows:
        print(f"{r['noise_kind']:>9} {r['intensity']:>7g}  BAR {r['bar_mean']:.4f} ± {r['bar_std']:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else default_output_dir() / "ablation"
    cfg = _config(args, out_dir)
    seeds = [int(s) for s in _floats(args.seeds)]
    if len(seeds) < 2:
        raise UsageError(f"ablation needs at least 2 seeds, got {seeds}")
    _check_dir(cfg.data_dir, "data directory")
    train, holdout = split_dataset(cfg)
    rows = ex.run_ablation(cfg, seeds, train, holdout, out_dir)
    ex.write_csv(out_dir / "ablation.csv", ex.ABLATION_COLUMNS, rows)
    summary = ex.summarize_ablation(rows)
    ex.write_csv(out_dir / "ablation_summary.csv",
                 ("variant", "use_se", "use_denoiser", "psnr", "ssim", "bar", "best_count", "n_seeds"), summary)
    for r in summary:
        print(f"{r['variant']:>12}  PSNR {r['psnr']:.2f}  SSIM {r['ssim']:.4f}  BAR {r['bar']:.4f}  "
              f"best in {r['best_count']}/{r['n_seeds']}")
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got '{text}'") from None


# ---------------------------------------------------------------------------
# parser


def _train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--message-length", dest="message_length", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--holdout-dir", dest="holdout_dir")
    p.add_argument("--noise-pool", dest="noise_pool", help="e.g. 'dropout:0.3,jpeg_sim:50'")
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--no-se", action="store_true", help="drop the channel-attention block")
    p.add_argument("--no-denoiser", action="store_true", help="drop the denoiser subnetwork")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmdenoise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _train_options(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--progress", type=int, default=0, help="log every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a message into an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--message", required=True, help="0/1 string or 0x-prefixed hex")
    p.add_argument("--out", required=True, help="encoded PNG path")
    p.add_argument("--residual", help="residual PNG path (default: <out>_residual.png)")
    p.add_argument("--gain", type=float, default=5.0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="decode a message from an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("sweep", help="BAR over a grid of distortion intensities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--kind", required=True, help="|".join(k.value for k in NoiseKind))
    p.add_argument("--intensities", help="comma-separated grid (default: built-in grid)")
    p.add_argument("--messages-per-image", dest="messages_per_image", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include-identity", action="store_true", help="prepend an undistorted row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train the four ±SE/±denoiser variants per seed")
    _train_options(p)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"wmdenoise {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, FileNotFoundError, RuntimeError, FloatingPointError, ValueError, OSError) as exc:
        print(f"wmdenoise {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
