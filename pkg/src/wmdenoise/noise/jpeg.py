"""Baseline JPEG pieces: IJG tables, 8×8 block DCT, a real codec and a
differentiable surrogate for training.

Both codecs use 4:4:4 chroma (no subsampling) and the JFIF YCbCr transform,
so the only difference between them is how quantization is treated.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, is_grad_enabled

BLOCK = 8

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)

RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
YCC_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])

# Quantization steps above this are zeroed by the surrogate.  At quality 50 it
# keeps sim/real PSNR within ~1.3 dB on photo crops (see calibrate_mask_threshold).
DEFAULT_MASK_THRESHOLD = 30.0


def ijg_scale_factor(quality: float) -> float:
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    quality = int(quality)
    return 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality


def quant_tables(quality: float) -> tuple[np.ndarray, np.ndarray]:
    """IJG-scaled (luma, chroma) tables, clamped to the baseline range [1, 255]."""
    scale = ijg_scale_factor(quality)

    def scaled(base):
        return np.clip(np.floor((base * scale + 50.0) / 100.0), 1, 255)

    return scaled(LUMA_TABLE), scaled(CHROMA_TABLE)


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix; rows are basis functions."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def block_dct_matrix(size: int) -> np.ndarray:
    """Block-diagonal DCT acting on every 8-sample run of a ``size`` axis."""
    if size % BLOCK:
        raise ValueError(f"block DCT needs a multiple of {BLOCK}, got {size}")
    return np.kron(np.eye(size // BLOCK), dct_matrix())


def padded_size(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def _pad_matrix(n: int) -> np.ndarray:
    # edge-replicating pad from n to the next multiple of 8, as a linear map
    m = np.zeros((padded_size(n), n))
    m[np.arange(padded_size(n)), np.minimum(np.arange(padded_size(n)), n - 1)] = 1.0
    return m


def blockwise_dct(planes: np.ndarray) -> np.ndarray:
    """2-D DCT of every 8×8 block of the trailing two axes (multiples of 8)."""
    h, w = planes.shape[-2:]
    return block_dct_matrix(h) @ planes @ block_dct_matrix(w).T


def blockwise_idct(coeffs: np.ndarray) -> np.ndarray:
    h, w = coeffs.shape[-2:]
    return block_dct_matrix(h).T @ coeffs @ block_dct_matrix(w)


def _tiled_tables(quality: float, h: int, w: int) -> np.ndarray:
    luma, chroma = quant_tables(quality)
    reps = (h // BLOCK, w // BLOCK)
    return np.stack([np.tile(luma, reps), np.tile(chroma, reps), np.tile(chroma, reps)])


def rgb_to_ycc(rgb255: np.ndarray) -> np.ndarray:
    """B×3×H×W RGB in [0,255] → level-shifted YCbCr (all channels centred on 0)."""
    ycc = np.einsum("ij,bjhw->bihw", RGB_TO_YCC, rgb255)
    ycc[:, 0] -= 128.0
    return ycc


def ycc_to_rgb(ycc: np.ndarray) -> np.ndarray:
    shifted = ycc.copy()
    shifted[:, 0] += 128.0
    return np.einsum("ij,bjhw->bihw", YCC_TO_RGB, shifted)


def jpeg_real(encoded, quality: float) -> np.ndarray:
    """Round-trip a [0,1] batch through baseline JPEG (4:4:4) and decode.

    Pixels are quantized to 8 bits before encoding, coefficients are divided
    by the IJG table and rounded half away from zero, and the decoded image
    is rounded and clipped back to 8 bits.  Not differentiable.
    """
    if isinstance(encoded, Tensor):
        if is_grad_enabled() and encoded.requires_grad:
            raise RuntimeError("jpeg_real is evaluation-only; call it under no_grad() or use jpeg_sim")
        encoded = encoded.data
    out_dtype = np.float64 if np.asarray(encoded).dtype == np.float64 else np.float32
    x = np.asarray(encoded, dtype=np.float64)
    q = _tiled_tables(quality, padded_size(x.shape[2]), padded_size(x.shape[3]))
    b, c, h, w = x.shape
    pixels = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5)
    pad_h, pad_w = _pad_matrix(h), _pad_matrix(w)
    ycc = pad_h @ rgb_to_ycc(pixels) @ pad_w.T
    coeffs = blockwise_dct(ycc)
    levels = np.sign(coeffs) * np.floor(np.abs(coeffs) / q + 0.5)
    rec = blockwise_idct(levels * q)[:, :, :h, :w]
    rgb = np.clip(np.floor(ycc_to_rgb(rec) + 0.5), 0, 255)
    return (rgb / 255.0).astype(out_dtype)


def sim_mask(quality: float, threshold: float = DEFAULT_MASK_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Per-coefficient keep masks (luma, chroma): 1 where the step is ≤ threshold."""
    luma, chroma = quant_tables(quality)
    return (luma <= threshold).astype(float), (chroma <= threshold).astype(float)


def jpeg_sim(encoded: Tensor, quality: float, threshold: float = DEFAULT_MASK_THRESHOLD) -> Tensor:
    """Differentiable JPEG surrogate.

    Same colour transform and block DCT as :func:`jpeg_real`; quantization is
    replaced by straight-through rounding of coefficient levels and a mask
    that drops every coefficient whose quantization step exceeds
    ``threshold``.  Gradients flow through the kept coefficients.
    """
    if not isinstance(encoded, Tensor):
        encoded = Tensor(np.asarray(encoded))
    b, c, h, w = encoded.shape
    hp, wp = padded_size(h), padded_size(w)
    dtype = encoded.dtype

    to_ycc = Tensor((RGB_TO_YCC * 255.0).reshape(3, 3, 1, 1), dtype=dtype)
    ycc_bias = Tensor(np.array([-128.0, 0.0, 0.0]), dtype=dtype)
    to_rgb = Tensor((YCC_TO_RGB / 255.0).reshape(3, 3, 1, 1), dtype=dtype)
    rgb_bias = Tensor(YCC_TO_RGB[:, 0] * 128.0 / 255.0, dtype=dtype)

    q = _tiled_tables(quality, hp, wp)
    luma_mask, chroma_mask = sim_mask(quality, threshold)
    reps = (hp // BLOCK, wp // BLOCK)
    keep = np.stack([np.tile(luma_mask, reps), np.tile(chroma_mask, reps), np.tile(chroma_mask, reps)])

    ycc = F.conv2d(encoded, to_ycc, ycc_bias)
    coeffs = F.separable_map(ycc, block_dct_matrix(hp) @ _pad_matrix(h), block_dct_matrix(wp) @ _pad_matrix(w))
    levels = F.round_ste(F.mul(coeffs, Tensor((1.0 / q)[None], dtype=dtype)))
    dequant = F.mul(levels, Tensor((q * keep)[None], dtype=dtype))
    crop_h, crop_w = np.eye(hp)[:h], np.eye(wp)[:w]
    rec = F.separable_map(dequant, crop_h @ block_dct_matrix(hp).T, crop_w @ block_dct_matrix(wp).T)
    return F.conv2d(rec, to_rgb, rgb_bias)


def calibrate_mask_threshold(images: np.ndarray, quality: float = 50,
                             candidates=None) -> dict[float, float]:
    """PSNR gap |sim − real| in dB, per candidate mask threshold.

    Both PSNRs are measured against ``images``; a threshold is usable when
    its gap stays inside the tolerance the caller cares about.
    """
    from ..autodiff.tensor import no_grad
    from ..metrics import psnr

    if candidates is None:
        candidates = np.unique(np.concatenate(quant_tables(quality)).ravel())
    images = np.asarray(images, dtype=np.float64)
    real_psnr = psnr(images, jpeg_real(images, quality))
    gaps = {}
    with no_grad():
        for t in candidates:
            sim = jpeg_sim(Tensor(images), quality, threshold=float(t)).data
            gaps[float(t)] = abs(psnr(images, sim) - real_psnr)
    return gaps
