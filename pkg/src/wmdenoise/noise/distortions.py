"""Distortions applied to encoded images during training and evaluation.

Every op keeps the B×3×H×W shape.  Randomness comes only from the
``numpy.random.Generator`` passed in, so a fixed seed gives bit-identical
output.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, is_grad_enabled
from .jpeg import jpeg_real, jpeg_sim
from .specs import NoiseKind, NoisePool, NoiseSpec


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _const(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.ascontiguousarray(arr), dtype=like.dtype)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def rectangle_side(dim: int, ratio: float) -> int:
    """Side of the kept rectangle along one axis: round(dim·√ratio)."""
    side = round_half_up(dim * math.sqrt(ratio))
    if side < 1:
        raise ValueError(f"kept rectangle rounds to zero width ({dim}·√{ratio})")
    return min(side, dim)


def random_rectangle_mask(h: int, w: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """H×W mask with a ones rectangle of area ≈ ratio·H·W at a uniform position."""
    sh, sw = rectangle_side(h, ratio), rectangle_side(w, ratio)
    top = int(rng.integers(0, h - sh + 1))
    left = int(rng.integers(0, w - sw + 1))
    mask = np.zeros((h, w))
    mask[top:top + sh, left:left + sw] = 1.0
    return mask


def _mix(encoded: Tensor, cover, keep: np.ndarray) -> Tensor:
    """keep·encoded + (1-keep)·cover with keep broadcast over channels."""
    keep = np.broadcast_to(keep, encoded.shape)
    cover = np.asarray(cover.data if isinstance(cover, Tensor) else cover, dtype=encoded.dtype)
    return F.add(F.mul(encoded, _const(keep, encoded)), _const((1.0 - keep) * cover, encoded))


def dropout_mix(encoded, cover, p: float, rng: np.random.Generator) -> Tensor:
    """Replace each pixel (all channels) by the cover pixel with probability p."""
    encoded = _tensor(encoded)
    b, _, h, w = encoded.shape
    replaced = rng.random((b, 1, h, w)) < p
    return _mix(encoded, cover, (~replaced).astype(np.float64))


def cropout_mix(encoded, cover, keep_ratio: float, rng: np.random.Generator) -> Tensor:
    """Keep one random rectangle of encoded content, cover elsewhere."""
    encoded = _tensor(encoded)
    h, w = encoded.shape[2:]
    mask = random_rectangle_mask(h, w, keep_ratio, rng)
    return _mix(encoded, cover, mask[None, None])


def crop_keep(encoded, keep_ratio: float, rng: np.random.Generator) -> Tensor:
    """Keep one random rectangle, zero elsewhere (full size is preserved)."""
    encoded = _tensor(encoded)
    h, w = encoded.shape[2:]
    mask = random_rectangle_mask(h, w, keep_ratio, rng)
    return F.mul(encoded, _const(np.broadcast_to(mask, encoded.shape), encoded))


def blur_kernel_size(sigma: float) -> int:
    """Odd support 2·ceil(2σ)+1; σ = 0 gives the 1-tap identity kernel."""
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    return 2 * math.ceil(2 * sigma) + 1


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    k = blur_kernel_size(sigma)
    if sigma == 0:
        return np.ones(1)
    x = np.arange(k) - k // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _reflect(i: int, n: int) -> int:
    # mirror without repeating the edge sample (…2 1 | 0 1 2 … n-1 | n-2 …)
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return i if i < n else period - i


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """n×n operator for 1-D Gaussian filtering with reflect padding."""
    g = gaussian_kernel1d(sigma)
    r = len(g) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for t in range(-r, r + 1):
            m[i, _reflect(i + t, n)] += g[t + r]
    return m


def gaussian_blur(encoded, sigma: float) -> Tensor:
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    encoded = _tensor(encoded)
    if sigma == 0:
        return F.add(encoded, 0.0)
    h, w = encoded.shape[2:]
    return F.separable_map(encoded, blur_matrix(h, sigma), blur_matrix(w, sigma))


def gaussian_noise(encoded, sigma: float, rng: np.random.Generator) -> Tensor:
    encoded = _tensor(encoded)
    if sigma == 0:
        return F.add(encoded, 0.0)
    return F.add(encoded, _const(rng.normal(0.0, sigma, size=encoded.shape), encoded))


def resize_cycle(encoded, scale: float) -> Tensor:
    """Bilinear downscale by ``scale`` then back up to the original size."""
    encoded = _tensor(encoded)
    h, w = encoded.shape[2:]
    sh, sw = round_half_up(h * scale), round_half_up(w * scale)
    if sh < 2 or sw < 2:
        raise ValueError(f"resize scale {scale} shrinks {h}x{w} below 2 pixels")
    rows = F.bilinear_matrix(sh, h) @ F.bilinear_matrix(h, sh)
    cols = F.bilinear_matrix(sw, w) @ F.bilinear_matrix(w, sw)
    return F.separable_map(encoded, rows, cols)


def apply(spec: NoiseSpec, encoded, cover, rng: np.random.Generator) -> Tensor:
    """Apply one distortion to the encoded batch (cover is used by mix kinds)."""
    encoded = _tensor(encoded)
    if cover is not None and tuple(np.shape(getattr(cover, "data", cover))) != encoded.shape:
        raise ValueError(f"cover shape {np.shape(getattr(cover, 'data', cover))} != encoded {encoded.shape}")
    kind, v = spec.kind, spec.intensity
    if kind is NoiseKind.IDENTITY:
        return encoded
    if kind is NoiseKind.DROPOUT:
        return dropout_mix(encoded, cover, v, rng)
    if kind is NoiseKind.CROPOUT:
        return cropout_mix(encoded, cover, v, rng)
    if kind is NoiseKind.CROP:
        return crop_keep(encoded, v, rng)
    if kind is NoiseKind.GAUSSIAN_BLUR:
        return gaussian_blur(encoded, v)
    if kind is NoiseKind.GAUSSIAN_NOISE:
        return gaussian_noise(encoded, v, rng)
    if kind is NoiseKind.RESIZE:
        return resize_cycle(encoded, v)
    if kind is NoiseKind.JPEG_SIM:
        return jpeg_sim(encoded, v)
    if kind is NoiseKind.JPEG_REAL:
        if is_grad_enabled() and encoded.requires_grad:
            raise RuntimeError("jpeg (real codec) is evaluation-only; use jpeg_sim inside training")
        return Tensor(jpeg_real(encoded.data, v))
    raise ValueError(f"unhandled noise kind {kind}")


def sample_and_apply(pool: NoisePool, encoded, cover, rng: np.random.Generator) -> tuple[Tensor, NoiseSpec]:
    """Draw one distortion for the whole mini-batch and apply it."""
    spec = pool.choose(rng)
    return apply(spec, encoded, cover, rng), spec
