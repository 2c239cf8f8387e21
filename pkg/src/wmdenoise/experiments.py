"""Robustness sweeps and the ±SE/±denoiser ablation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .noise import NoiseKind, NoiseSpec
from .training import TrainConfig, evaluate, pool_bar, train_loop
from .models import WatermarkModel

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("noise_kind", "intensity", "bar_mean", "bar_std", "psnr", "ssim", "n", "seed")
ABLATION_COLUMNS = ("variant", "use_se", "use_denoiser", "seed", "psnr", "ssim", "bar")
MIN_ABLATION_STEPS = 500

DEFAULT_GRIDS: dict[NoiseKind, tuple[float, ...]] = {
    NoiseKind.JPEG_REAL: tuple(range(10, 100, 10)),
    NoiseKind.JPEG_SIM: tuple(range(10, 100, 10)),
    NoiseKind.CROP: tuple(round(0.01 * i, 2) for i in range(1, 11)),
    NoiseKind.CROPOUT: tuple(round(0.1 * i, 1) for i in range(1, 10)),
    NoiseKind.DROPOUT: tuple(round(0.1 * i, 1) for i in range(1, 10)),
    NoiseKind.GAUSSIAN_BLUR: tuple(0.5 * i for i in range(1, 9)),
    NoiseKind.RESIZE: (0.5, 0.6, 0.7, 0.8, 0.9),
    NoiseKind.GAUSSIAN_NOISE: (0.01, 0.05, 0.1, 0.15, 0.2),
    NoiseKind.IDENTITY: (0.0,),
}

# (name, use_se, use_denoiser); the last row is the full model
VARIANTS = (
    ("baseline", False, False),
    ("se", True, False),
    ("denoiser", False, True),
    ("se+denoiser", True, True),
)


@dataclass
class SweepSpec:
    kind: NoiseKind
    intensities: Sequence[float]
    images_dir: str = ""
    checkpoint: str = ""
    messages_per_image: int = 10
    seed: int = 0

    def __post_init__(self):
        self.kind = NoiseKind(self.kind)
        if not len(self.intensities):
            raise ValueError("sweep needs at least one intensity")
        if self.messages_per_image < 1:
            raise ValueError("messages_per_image must be >= 1")
        self.intensities = tuple(float(v) for v in self.intensities)
        for v in self.intensities:
            NoiseSpec(self.kind, v)  # range check

    def specs(self) -> list[NoiseSpec]:
        return [NoiseSpec(self.kind, v) for v in sorted(set(self.intensities))]


def run_sweep(model: WatermarkModel, images: np.ndarray, sweep: SweepSpec) -> list[dict]:
    """One row per intensity, sorted by intensity."""
    if len(images) == 0:
        raise ValueError("sweep: empty image set")
    specs = sweep.specs()
    results = evaluate(model, images, specs, seed=sweep.seed, messages_per_image=sweep.messages_per_image)
    rows = []
    for spec in specs:
        r = results[str(spec)]
        rows.append({
            "noise_kind": spec.kind.value, "intensity": spec.intensity,
            "bar_mean": r["bar_mean"], "bar_std": r["bar_std"],
            "psnr": r["psnr"], "ssim": r["ssim"], "n": r["n"], "seed": sweep.seed,
        })
    return rows


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return path


def read_csv(path: Union[str, Path]) -> list[dict]:
    """Parse a sweep/ablation CSV back, restoring numeric fields."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key, value in row.items():
            if key in ("noise_kind", "variant"):
                continue
            if value in ("True", "False"):
                row[key] = value == "True"
            elif key in ("n", "seed"):
                row[key] = int(value)
            else:
                row[key] = float(value)
    return rows


def run_ablation(base: TrainConfig, seeds: Sequence[int], train_images: np.ndarray,
                 holdout: np.ndarray, out_dir: Union[str, Path],
                 messages_per_image: int = 4, variants=VARIANTS) -> list[dict]:
    """Train every variant for every seed with the same budget and data.

    BAR is the mean over the training noise pool on the held-out images.
    """
    if len(seeds) < 2:
        raise ValueError(f"ablation needs at least 2 seeds, got {len(seeds)}")
    if base.steps < MIN_ABLATION_STEPS:
        log.warning("ablation budget of %d steps is below %d; variant ordering is likely noise",
                    base.steps, MIN_ABLATION_STEPS)
    out_dir = Path(out_dir)
    pool = base.pool()
    rows = []
    for seed in seeds:
        for name, use_se, use_den in variants:
            cfg = base.replace(seed=seed, use_se=use_se, use_denoiser=use_den,
                               out_dir=str(out_dir / f"seed{seed}_{name.replace('+', '_')}"))
            log.info("ablation: seed %d variant %s", seed, name)
            result = train_loop(cfg, images=train_images)
            bar, per_spec = pool_bar(result.state.model, holdout, pool, seed=seed,
                                     messages_per_image=messages_per_image)
            first = next(iter(per_spec.values()))
            rows.append({"variant": name, "use_se": use_se, "use_denoiser": use_den, "seed": seed,
                         "psnr": first["psnr"], "ssim": first["ssim"], "bar": bar})
    return rows


def summarize_ablation(rows: Sequence[dict]) -> list[dict]:
    """Mean PSNR/SSIM/BAR per variant plus how often it had the best BAR."""
    seeds = sorted({r["seed"] for r in rows})
    best = {}
    for seed in seeds:
        group = [r for r in rows if r["seed"] == seed]
        top = max(r["bar"] for r in group)
        for r in group:
            if r["bar"] == top:
                best[r["variant"]] = best.get(r["variant"], 0) + 1
    out = []
    for name in dict.fromkeys(r["variant"] for r in rows):
        group = [r for r in rows if r["variant"] == name]
        out.append({
            "variant": name, "use_se": group[0]["use_se"], "use_denoiser": group[0]["use_denoiser"],
            "psnr": float(np.mean([r["psnr"] for r in group])),
            "ssim": float(np.mean([r["ssim"] for r in group])),
            "bar": float(np.mean([r["bar"] for r in group])),
            "best_count": best.get(name, 0), "n_seeds": len(group),
        })
    return out


def default_grid(kind: Union[str, NoiseKind], override: Optional[Sequence[float]] = None) -> tuple[float, ...]:
    kind = NoiseKind(kind)
    return tuple(override) if override else DEFAULT_GRIDS[kind]
