"""Encoder, denoiser, decoder and patch discriminator, with their losses.

Data flow for one batch::

    cover, bits ──encoder──▶ encoded ──noise──▶ noised ──denoiser──▶ residual
                                                   │                   │
                                                   └──── concat ◀──────┘
                                                            │
                                                         decoder ──▶ scores

The denoiser predicts the embedding residual (encoded − cover) from the
noised image; the decoder reads the bits from [residual ⊕ noised].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, ConvBlock, Linear, Module
from .autodiff.tensor import Tensor

MESSAGE_GRID = 16


@dataclass
class ModelConfig:
    image_size: int = 128
    message_length: int = 30
    encoder_channels: int = 64
    decoder_channels: int = 64
    denoiser_channels: int = 64  # doubles at each of the two downsamplings
    discriminator_channels: int = 64
    se_reduction: int = 4
    use_se: bool = True
    use_denoiser: bool = True
    denoiser_output: str = "residual"  # or "reconstruct": decoder sees noised − prediction

    def __post_init__(self):
        if self.image_size % MESSAGE_GRID:
            raise ValueError(f"image size must be a multiple of {MESSAGE_GRID}, got {self.image_size}")
        if not 1 <= self.message_length <= MESSAGE_GRID * MESSAGE_GRID:
            raise ValueError(f"message length must be in [1, {MESSAGE_GRID ** 2}]")
        if self.denoiser_output not in ("residual", "reconstruct"):
            raise ValueError(f"denoiser_output must be 'residual' or 'reconstruct', got {self.denoiser_output!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def _child_rng(rng: np.random.Generator) -> np.random.Generator:
    # drawn unconditionally so optional parts never shift the other streams
    return np.random.default_rng(int(rng.integers(2 ** 63)))


def _as_input(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


class SEBlock(Module):
    """Squeeze (global mean) → excite (fc, relu, fc, sigmoid) → per-channel scale."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def gates(self, x: Tensor) -> Tensor:
        squeezed = F.global_avg_pool(x)
        return F.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))

    def forward(self, x: Tensor) -> Tensor:
        return F.channel_scale(x, self.gates(x))


class MessageDispersion(Module):
    """Bits → linear → 16×16 map → nearest upsample to the image size."""

    def __init__(self, message_length: int, rng: np.random.Generator):
        self.linear = Linear(message_length, MESSAGE_GRID * MESSAGE_GRID, rng)

    def forward(self, message: Tensor, h: int, w: int) -> Tensor:
        if h % MESSAGE_GRID or w % MESSAGE_GRID or h != w:
            raise ValueError(f"image {h}x{w} must be square and a multiple of {MESSAGE_GRID}")
        b = message.shape[0]
        grid = F.reshape(self.linear(message), (b, 1, MESSAGE_GRID, MESSAGE_GRID))
        return F.nearest_upsample(grid, h // MESSAGE_GRID)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.encoder_channels
        self.image_in = ConvBlock(3, c, rng)
        self.image_mid = ConvBlock(c, c, rng)
        self.dispersion = MessageDispersion(cfg.message_length, rng)
        se_rng = _child_rng(rng)
        self.se = SEBlock(c + 1, cfg.se_reduction, se_rng) if cfg.use_se else None
        self.fuse = ConvBlock(c + 1, c, rng)
        self.refine = ConvBlock(c, c, rng)
        # zero head: training starts from encoded == cover
        self.head = Conv2d(c, 3, 3, rng, zero_init=True)

    def forward(self, cover, message) -> Tensor:
        cover = _as_input(cover)
        message = _as_input(message, cover.dtype)
        h, w = cover.shape[2:]
        feats = self.image_mid(self.image_in(cover))
        stack = F.concat([feats, self.dispersion(message, h, w)], axis=1)
        if self.se is not None:
            stack = self.se(stack)
        return F.add(cover, self.head(self.refine(self.fuse(stack))))


class Denoiser(Module):
    """Three-level UNet followed by a two-conv fully convolutional head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c1 = cfg.denoiser_channels
        c2, c3 = 2 * c1, 4 * c1
        self.down1 = [ConvBlock(3, c1, rng), ConvBlock(c1, c1, rng)]
        self.down2 = [ConvBlock(c1, c2, rng), ConvBlock(c2, c2, rng)]
        self.bottom = [ConvBlock(c2, c3, rng), ConvBlock(c3, c3, rng)]
        self.up2 = ConvBlock(c3 + c2, c2, rng)
        self.up1 = ConvBlock(c2 + c1, c1, rng)
        self.fcn = ConvBlock(c1, c1, rng)
        self.out = Conv2d(c1, 3, 3, rng, zero_init=True)

    @staticmethod
    def _run(blocks, x):
        for block in blocks:
            x = block(x)
        return x

    def forward(self, noised) -> Tensor:
        x = _as_input(noised)
        e1 = self._run(self.down1, x)
        e2 = self._run(self.down2, F.avg_pool2d(e1, 2))
        e3 = self._run(self.bottom, F.avg_pool2d(e2, 2))
        d2 = self.up2(F.concat([F.nearest_upsample(e3, 2), e2], axis=1))
        d1 = self.up1(F.concat([F.nearest_upsample(d2, 2), e1], axis=1))
        return self.out(self.fcn(d1))


class Decoder(Module):
    """Conv trunk over [residual ⊕ noised] → pooled features → bit logits.

    Pooling keeps two views: a global channel mean (position-free) and a
    one-channel map averaged onto the 16×16 message grid (position-aware).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.decoder_channels
        # downsample at most twice and never below the message grid
        n_down = min(2, int(np.log2(cfg.image_size // MESSAGE_GRID)))
        self.trunk = [ConvBlock(6, c, rng)]
        self.trunk += [ConvBlock(c, c, rng, stride=2) for _ in range(n_down)]
        self.trunk.append(ConvBlock(c, c, rng))
        self.grid_proj = Conv2d(c, 1, 1, rng)
        self.head = Linear(c + MESSAGE_GRID * MESSAGE_GRID, cfg.message_length, rng)

    def logits(self, residual, noised) -> Tensor:
        residual, noised = _as_input(residual), _as_input(noised)
        if residual.shape != noised.shape:
            raise ValueError(f"decoder inputs differ: {residual.shape} vs {noised.shape}")
        x = F.concat([residual, noised], axis=1)
        for block in self.trunk:
            x = block(x)
        b, _, h, _ = x.shape
        pooled = F.global_avg_pool(x)
        grid = F.avg_pool2d(self.grid_proj(x), h // MESSAGE_GRID)
        grid = F.reshape(grid, (b, MESSAGE_GRID * MESSAGE_GRID))
        return self.head(F.concat([pooled, grid], axis=1))

    def forward(self, residual, noised) -> Tensor:
        return F.sigmoid(self.logits(residual, noised))


class Discriminator(Module):
    """PatchGAN: three stride-2 4×4 blocks, one stride-1 block, 1-channel logit map.

    Receptive field of each output logit is 70×70 pixels.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.discriminator_channels
        self.blocks = [
            ConvBlock(3, c, rng, k=4, stride=2, padding=1),
            ConvBlock(c, 2 * c, rng, k=4, stride=2, padding=1),
            ConvBlock(2 * c, 4 * c, rng, k=4, stride=2, padding=1),
            ConvBlock(4 * c, 4 * c, rng, k=4, stride=1, padding=2),
        ]
        self.head = Conv2d(4 * c, 1, 4, rng, padding=1, zero_init=True)

    def forward(self, images) -> Tensor:
        x = _as_input(images)
        for block in self.blocks:
            x = block(x)
        return self.head(x)


class WatermarkModel(Module):
    """The generator side (encoder, denoiser, decoder) plus the discriminator."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        streams = [_child_rng(rng) for _ in range(4)]
        self.encoder = Encoder(cfg, streams[0])
        self.denoiser = Denoiser(cfg, streams[1]) if cfg.use_denoiser else None
        self.decoder = Decoder(cfg, streams[2])
        self.discriminator = Discriminator(cfg, streams[3])

    def generator_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()]
        if self.denoiser is not None:
            out += [(f"denoiser.{n}", p) for n, p in self.denoiser.named_parameters()]
        out += [(f"decoder.{n}", p) for n, p in self.decoder.named_parameters()]
        return out

    def discriminator_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"discriminator.{n}", p) for n, p in self.discriminator.named_parameters()]

    def encode(self, cover, message) -> Tensor:
        return self.encoder(cover, message)

    def denoise_residual(self, noised) -> Tensor:
        """Predicted embedding residual; zeros when the denoiser is ablated."""
        noised = _as_input(noised)
        if self.denoiser is None:
            return Tensor(np.zeros(noised.shape, dtype=noised.dtype))
        return self.denoiser(noised)

    def decoder_input(self, noised) -> tuple[Tensor, Tensor]:
        """(first decoder branch, denoiser prediction) for a noised batch."""
        noised = _as_input(noised)
        pred = self.denoise_residual(noised)
        if self.cfg.denoiser_output == "reconstruct" and self.denoiser is not None:
            return F.sub(noised, pred), pred
        return pred, pred

    def decode_logits(self, noised) -> tuple[Tensor, Tensor]:
        """(bit logits, denoiser prediction) for a noised batch."""
        noised = _as_input(noised)
        first, pred = self.decoder_input(noised)
        return self.decoder.logits(first, noised), pred

    def decode(self, noised) -> Tensor:
        return F.sigmoid(self.decode_logits(noised)[0])

    def pipeline(self, cover, message, distort: Callable[[Tensor], Tensor]) -> dict[str, Tensor]:
        encoded = self.encode(cover, message)
        noised = distort(encoded)
        logits, pred = self.decode_logits(noised)
        return {"encoded": encoded, "noised": noised, "residual": pred,
                "logits": logits, "scores": F.sigmoid(logits)}


# ---------------------------------------------------------------------------
# per-network losses


def encoder_loss(encoded, cover) -> Tensor:
    """Pixel MSE between encoded and cover."""
    return F.mse(_as_input(encoded), cover)


def denoiser_loss(predicted: Tensor, encoded, cover, n: Optional[int] = None,
                  detach_target: bool = True) -> Tensor:
    """(1/2N)·Σ‖prediction − (encoded − cover)‖²_F over the batch.

    With ``detach_target`` the embedding residual is a fixed target and the
    loss trains only the denoiser; otherwise it also pulls on the encoder.
    """
    encoded = _as_input(encoded)
    n = predicted.shape[0] if n is None else n
    if n <= 0:
        raise ValueError("denoiser_loss needs a positive batch size")
    target = F.sub(encoded.detach() if detach_target else encoded, cover)
    if predicted.shape != target.shape:
        raise ValueError(f"denoiser_loss: prediction {predicted.shape} vs target {target.shape}")
    return F.mul(F.sum(F.square(F.sub(predicted, target))), 1.0 / (2.0 * n))


def decoder_loss(w_in, scores: Tensor) -> Tensor:
    """‖bits − scores‖²/L, averaged over the batch (soft scores keep a gradient)."""
    scores = _as_input(scores)
    w_in = np.asarray(getattr(w_in, "data", w_in), dtype=scores.dtype)
    if w_in.shape != scores.shape:
        raise ValueError(f"decoder_loss: length mismatch {w_in.shape} vs {scores.shape}")
    return F.mse(scores, w_in)


def discriminator_losses(disc: Discriminator, cover, encoded: Tensor) -> tuple[Tensor, Tensor]:
    """(d_loss, g_adv_loss).

    d_loss  = BCE(D(cover)→1) + BCE(D(encoded, detached)→0)
    g_adv   = BCE(D(encoded)→1)   (non-saturating generator term)
    """
    real = disc(cover)
    fake = disc(encoded.detach())
    d_loss = F.add(F.bce_with_logits(real, 1.0), F.bce_with_logits(fake, 0.0))
    g_adv = F.bce_with_logits(disc(encoded), 1.0)
    return d_loss, g_adv


def hard_threshold(scores, threshold: float = 0.5) -> np.ndarray:
    """Bits: 1 where score > threshold (strictly), else 0."""
    s = np.asarray(getattr(scores, "data", scores))
    return (s > threshold).astype(np.int64)
