"""End-to-end training: weighted total loss, alternating D/G updates,
evaluation and checkpointing.

One step:
  1. the encoder embeds random bits into a cover batch;
  2. the discriminator takes an Adam step on cover-vs-encoded (encoded is
     detached, so no gradient reaches the encoder);
  3. one distortion is drawn from the pool for the whole batch, the denoiser
     and decoder run, and the generator (encoder + denoiser + decoder) takes
     an Adam step on λ1·L_enc + λ2·L_dec + λ3·L_adv + λ4·L_den.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import checkpoint as ckpt
from .autodiff import functional as F
from .autodiff.optim import Adam, clip_grad_norm
from .autodiff.tensor import Tensor, backward, no_grad
from .imaging import load_images
from .metrics import MetricsReport, bit_accuracy, psnr, ssim
from .models import (
    ModelConfig,
    WatermarkModel,
    decoder_loss,
    denoiser_loss,
    encoder_loss,
    hard_threshold,
)
from .noise import NoisePool, NoiseSpec, apply, sample_and_apply

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "l_enc", "l_dec", "l_adv", "l_den", "bar", "noise_kind", "l_disc", "l_total")
DEFAULT_LAMBDAS = (0.7, 0.1, 1e-3, 1.5)
# "denoiser": the residual-regression term updates the denoiser only (it is
# computed on a detached copy of the noised batch against a detached target);
# "end_to_end": the term is taken on the decoding pass and reaches the encoder.
DENOISE_SCOPES = ("denoiser", "end_to_end")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    image_size: int = 128
    message_length: int = 30
    batch_size: int = 16
    steps: int = 1000
    lr: float = 1e-3
    lambda_enc: float = DEFAULT_LAMBDAS[0]
    lambda_dec: float = DEFAULT_LAMBDAS[1]
    lambda_adv: float = DEFAULT_LAMBDAS[2]
    lambda_den: float = DEFAULT_LAMBDAS[3]
    noise_pool: str = "dropout:0.3,blur:2.0,jpeg_sim:50,resize:0.8,crop:0.035"
    seed: int = 0
    checkpoint_interval: int = 0
    data_dir: str = ""
    holdout_dir: str = ""
    holdout_count: int = 8
    out_dir: str = "runs/default"
    encoder_channels: int = 64
    decoder_channels: int = 64
    denoiser_channels: int = 64
    discriminator_channels: int = 64
    se_reduction: int = 4
    use_se: bool = True
    use_denoiser: bool = True
    denoiser_output: str = "residual"
    denoise_scope: str = "denoiser"
    grad_clip: float = 5.0
    eval_messages: int = 4

    def __post_init__(self):
        lambdas = (self.lambda_enc, self.lambda_dec, self.lambda_adv, self.lambda_den)
        if any(v < 0 for v in lambdas):
            raise ConfigError(f"loss weights must be >= 0, got {lambdas}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.denoise_scope not in DENOISE_SCOPES:
            raise ConfigError(f"denoise_scope must be one of {DENOISE_SCOPES}, got {self.denoise_scope!r}")
        if self.image_size % 16:
            raise ConfigError(f"image_size must be a multiple of 16, got {self.image_size}")
        try:
            self.pool()
        except ValueError as exc:
            raise ConfigError(f"noise_pool: {exc}") from None

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda_enc, self.lambda_dec, self.lambda_adv, self.lambda_den)

    def pool(self) -> NoisePool:
        return NoisePool.parse(self.noise_pool)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            message_length=self.message_length,
            encoder_channels=self.encoder_channels,
            decoder_channels=self.decoder_channels,
            denoiser_channels=self.denoiser_channels,
            discriminator_channels=self.discriminator_channels,
            se_reduction=self.se_reduction,
            use_se=self.use_se,
            use_denoiser=self.use_denoiser,
            denoiser_output=self.denoiser_output,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def coerce_value(key: str, raw: str):
    """Convert a text value to the TrainConfig field type for ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown key '{key}'")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"'{key}' expects a boolean, got '{raw}'")
    if kind in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"'{key}' expects an integer, got '{raw}'") from None
    if kind in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"'{key}' expects a number, got '{raw}'") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{stripped}'")
        key = key.strip()
        try:
            values[key] = coerce_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path: Union[str, Path, None] = None, overrides: Optional[dict] = None) -> TrainConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update(overrides or {})
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# losses


def total_loss(l_enc, l_dec, l_adv, l_den, lambdas: Sequence[float] = DEFAULT_LAMBDAS):
    """λ1·l_enc + λ2·l_dec + λ3·l_adv + λ4·l_den, with no extra normalization.

    Components may be floats or scalar tensors; a non-finite component
    raises :class:`NonFiniteLossError` naming it.
    """
    parts = {"l_enc": l_enc, "l_dec": l_dec, "l_adv": l_adv, "l_den": l_den}
    for name, value in parts.items():
        v = float(value.data) if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"loss component {name} is not finite ({v})")
    terms = [F.mul(v, w) if isinstance(v, Tensor) else w * v for w, v in zip(lambdas, parts.values())]
    out = terms[0]
    for term in terms[1:]:
        out = F.add(out, term) if isinstance(out, Tensor) or isinstance(term, Tensor) else out + term
    return out


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    model: WatermarkModel
    opt_gen: Adam
    opt_disc: Adam
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng([config.seed, 1])
        model = WatermarkModel(config.model_config(), init_rng)
        return cls(
            config=config,
            model=model,
            opt_gen=Adam(model.generator_parameters(), lr=config.lr),
            opt_disc=Adam(model.discriminator_parameters(), lr=config.lr),
            rng=rng,
        )


@dataclass
class StepMetrics:
    step: int
    l_enc: float
    l_dec: float
    l_adv: float
    l_den: float
    bar: float
    noise_kind: str
    l_disc: float
    l_total: float

    def row(self) -> list:
        return [getattr(self, c) for c in METRICS_COLUMNS]


def random_messages(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, length)).astype(np.float32)


def generator_losses(model: WatermarkModel, cfg: TrainConfig, cover: Tensor, messages: Tensor,
                     encoded: Tensor, noised: Tensor) -> dict:
    """Every generator-side term plus their weighted total for one batch."""
    logits, pred = model.decode_logits(noised)
    scores = F.sigmoid(logits)
    l_enc = encoder_loss(encoded, cover)
    l_dec = decoder_loss(messages, scores)
    l_adv = F.bce_with_logits(model.discriminator(encoded), 1.0)
    if model.denoiser is None:
        l_den = 0.0
    elif cfg.denoise_scope == "end_to_end":
        l_den = denoiser_loss(pred, encoded, cover, detach_target=False)
    else:
        l_den = denoiser_loss(model.denoiser(noised.detach()), encoded, cover)
    total = total_loss(l_enc, l_dec, l_adv, l_den, cfg.lambdas)
    return {"l_enc": l_enc, "l_dec": l_dec, "l_adv": l_adv, "l_den": l_den, "total": total, "scores": scores}


def train_step(state: TrainState, cover: np.ndarray, messages: np.ndarray) -> StepMetrics:
    cfg, model = state.config, state.model
    cover_t = Tensor(np.asarray(cover, dtype=model.encoder.head.weight.dtype))
    msg_t = Tensor(np.asarray(messages), dtype=cover_t.dtype)

    encoded = model.encode(cover_t, msg_t)

    # discriminator: cover → real, detached encoded → fake
    state.opt_disc.zero_grad()
    disc = model.discriminator
    d_loss = F.add(F.bce_with_logits(disc(cover_t), 1.0), F.bce_with_logits(disc(encoded.detach()), 0.0))
    if not math.isfinite(float(d_loss.data)):
        raise NonFiniteLossError(f"discriminator loss is not finite at step {state.step + 1}")
    backward(d_loss)
    if cfg.grad_clip > 0:
        clip_grad_norm(list(state.opt_disc.params.values()), cfg.grad_clip)
    state.opt_disc.step()

    # generator
    state.opt_gen.zero_grad()
    noised, spec = sample_and_apply(cfg.pool(), encoded, cover_t, state.rng)
    losses = generator_losses(model, cfg, cover_t, msg_t, encoded, noised)
    l_enc, l_dec, l_adv, l_den, total = (losses[k] for k in ("l_enc", "l_dec", "l_adv", "l_den", "total"))
    scores = losses["scores"]
    backward(total)
    if cfg.grad_clip > 0:
        clip_grad_norm(list(state.opt_gen.params.values()), cfg.grad_clip)
    state.opt_gen.step()
    state.step += 1

    return StepMetrics(
        step=state.step,
        l_enc=float(l_enc.data),
        l_dec=float(l_dec.data),
        l_adv=float(l_adv.data),
        l_den=float(l_den.data) if isinstance(l_den, Tensor) else float(l_den),
        bar=bit_accuracy(messages, hard_threshold(scores)),
        noise_kind=str(spec),
        l_disc=float(d_loss.data),
        l_total=float(total.data),
    )


# ---------------------------------------------------------------------------
# checkpoints


def _adam_records(prefix: str, opt: Adam) -> dict[str, np.ndarray]:
    out = {f"{prefix}.t": np.array(opt.state.t, dtype=np.int64)}
    for name in opt.params:
        if name in opt.state.m:
            out[f"{prefix}.m.{name}"] = opt.state.m[name]
            out[f"{prefix}.v.{name}"] = opt.state.v[name]
    return out


def _json_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def _json_from_record(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))


def state_records(state: TrainState) -> dict[str, np.ndarray]:
    records = {
        "meta.config": _json_record(dataclasses.asdict(state.config)),
        "meta.rng": _json_record(state.rng.bit_generator.state),
        "meta.step": np.array(state.step, dtype=np.int64),
    }
    for name, p in state.model.generator_parameters() + state.model.discriminator_parameters():
        records[f"param.{name}"] = p.data
    records.update(_adam_records("adam.gen", state.opt_gen))
    records.update(_adam_records("adam.disc", state.opt_disc))
    return records


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    return ckpt.write_records(path, state_records(state))


def _restore_adam(prefix: str, opt: Adam, records: dict) -> None:
    opt.state.t = int(records[f"{prefix}.t"])
    opt.state.m, opt.state.v = {}, {}
    for name in opt.params:
        key = f"{prefix}.m.{name}"
        if key in records:
            opt.state.m[name] = records[key].copy()
            opt.state.v[name] = records[f"{prefix}.v.{name}"].copy()


def state_from_records(records: dict[str, np.ndarray]) -> TrainState:
    try:
        config = TrainConfig(**_json_from_record(records["meta.config"]))
        state = TrainState.create(config)
        params = dict(state.model.generator_parameters() + state.model.discriminator_parameters())
        for name, p in params.items():
            arr = records[f"param.{name}"]
            if arr.shape != p.shape:
                raise ckpt.CheckpointError(f"param.{name}: shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()
            p.grad = np.zeros_like(p.data)
        _restore_adam("adam.gen", state.opt_gen, records)
        _restore_adam("adam.disc", state.opt_disc, records)
        state.rng.bit_generator.state = _json_from_record(records["meta.rng"])
        state.step = int(records["meta.step"])
    except KeyError as exc:
        raise ckpt.CheckpointError(f"checkpoint is missing record {exc}") from None
    return state


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    return state_from_records(ckpt.read_records(path))


# ---------------------------------------------------------------------------
# evaluation


def quantize_8bit(images: np.ndarray) -> np.ndarray:
    return (np.floor(np.clip(images, 0.0, 1.0) * 255.0 + 0.5) / 255.0).astype(images.dtype)


def embed(model: WatermarkModel, cover: np.ndarray, messages: np.ndarray, batch: int = 16) -> np.ndarray:
    """Encoded images, clamped and rounded to 8 bits as they would be saved."""
    out = []
    with no_grad():
        for i in range(0, len(cover), batch):
            out.append(model.encode(Tensor(cover[i:i + batch]), Tensor(messages[i:i + batch])).data)
    return quantize_8bit(np.concatenate(out))


def extract_scores(model: WatermarkModel, noised: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(noised), batch):
            out.append(model.decode(Tensor(noised[i:i + batch])).data)
    return np.concatenate(out)


def evaluate(model: WatermarkModel, images: np.ndarray, specs: Sequence[NoiseSpec],
             seed: int = 0, messages_per_image: int = 4) -> dict[str, dict]:
    """Per-distortion BAR (mean and std over images×messages), PSNR and SSIM.

    Each spec sees the same covers and messages, so rows are comparable.
    """
    rng = np.random.default_rng(seed)
    length = model.cfg.message_length
    covers = np.repeat(images, messages_per_image, axis=0)
    messages = random_messages(rng, len(covers), length)
    encoded = embed(model, covers, messages)
    quality = {"psnr": psnr(covers, encoded), "ssim": ssim(covers, encoded)}
    results = {}
    for spec in specs:
        noise_rng = np.random.default_rng([seed, 7])
        with no_grad():
            noised = np.concatenate([
                apply(spec, Tensor(encoded[i:i + 16]), covers[i:i + 16], noise_rng).data
                for i in range(0, len(encoded), 16)
            ])
        bits = hard_threshold(extract_scores(model, noised))
        per_item = (bits == messages).mean(axis=1)
        results[str(spec)] = {
            "bar_mean": float(per_item.mean()),
            "bar_std": float(per_item.std()),
            "bar": bit_accuracy(messages, bits),
            "n": int(len(covers)),
            **quality,
        }
    return results


def evaluate_report(model: WatermarkModel, images: np.ndarray, spec: NoiseSpec,
                    seed: int = 0, messages_per_image: int = 4) -> MetricsReport:
    r = evaluate(model, images, [spec], seed, messages_per_image)[str(spec)]
    return MetricsReport(psnr_db=r["psnr"], ssim=r["ssim"], bar=r["bar"], n_images=len(images), seed=seed)


def pool_bar(model: WatermarkModel, images: np.ndarray, pool: NoisePool,
             seed: int = 0, messages_per_image: int = 4) -> tuple[float, dict]:
    """Mean BAR over every distortion in ``pool`` (the training-pool robustness)."""
    results = evaluate(model, images, pool.specs, seed, messages_per_image)
    return float(np.mean([r["bar"] for r in results.values()])), results


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    state: TrainState
    metrics_path: Path
    checkpoints: list = field(default_factory=list)
    final_checkpoint: Optional[Path] = None


def split_dataset(config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """(train images, held-out images) from the configured directories."""
    data = load_images(config.data_dir, config.image_size, config.image_size)
    if config.holdout_dir:
        return data, load_images(config.holdout_dir, config.image_size, config.image_size)
    k = min(config.holdout_count, len(data) - 1)
    if k <= 0:
        return data, data
    return data[:-k], data[-k:]


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def train_loop(config: TrainConfig, images: Optional[np.ndarray] = None,
               resume: Union[str, Path, None] = None, progress_every: int = 0) -> TrainResult:
    """Run ``config.steps`` generator/discriminator steps.

    Writes ``metrics.csv`` (appending when resuming), a checkpoint every
    ``checkpoint_interval`` steps, and ``final.ckpt``.  On a non-finite loss
    the generator parameters are still the last good ones (the failing update
    is never applied); they are dumped to ``last_good.ckpt`` before raising.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if images is None:
        images, _ = split_dataset(config)
    if resume is not None:
        state = load_checkpoint(resume)
        state.config = state.config.replace(steps=config.steps, out_dir=config.out_dir,
                                            checkpoint_interval=config.checkpoint_interval)
    else:
        state = TrainState.create(config)
    cfg = state.config

    metrics_path = out_dir / "metrics.csv"
    fresh = resume is None or not metrics_path.exists()
    result = TrainResult(state=state, metrics_path=metrics_path)
    with open(metrics_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        while state.step < cfg.steps:
            idx = state.rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
            messages = random_messages(state.rng, len(idx), cfg.message_length)
            try:
                metrics = train_step(state, images[idx], messages)
            except FloatingPointError as exc:
                dump = save_checkpoint(state, out_dir / "last_good.ckpt")
                raise NonFiniteLossError(f"{exc}; last good state written to {dump}") from exc
            writer.writerow([_format(v) for v in metrics.row()])
            if progress_every and state.step % progress_every == 0:
                log.info("step %d: dec %.4f enc %.5f den %.4f bar %.3f (%s)", state.step, metrics.l_dec,
                         metrics.l_enc, metrics.l_den, metrics.bar, metrics.noise_kind)
            if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                result.checkpoints.append(save_checkpoint(state, out_dir / f"step_{state.step:06d}.ckpt"))
    result.final_checkpoint = save_checkpoint(state, out_dir / "final.ckpt")
    return result


def read_metrics(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in row:
            if key == "step":
                row[key] = int(row[key])
            elif key != "noise_kind":
                row[key] = float(row[key])
    return rows
