"""PSNR, SSIM and bit accuracy on [0, 1] images."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected B×C×H×W or C×H×W images, got shape {arr.shape}")
    return arr


def psnr(a, b, max_value: float = 1.0) -> float:
    """Mean per-image PSNR in dB; identical images score ``PSNR_CAP_DB``."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        per_image = np.where(mse > 0, 10.0 * np.log10(max_value ** 2 / np.maximum(mse, 1e-300)), PSNR_CAP_DB)
    return float(np.minimum(per_image, PSNR_CAP_DB).mean())


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = len(g)
    h, w = img.shape[-2:]
    tmp = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * tmp[..., :, j:w - k + 1 + j] for j in range(k))


def ssim(a, b) -> float:
    """Mean local SSIM (11×11 Gaussian, σ=1.5) over valid windows, channels, images."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim: images {a.shape[-2:]} smaller than the {SSIM_WINDOW}px window")
    g = gaussian_window()
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a ** 2
    var_b = _valid_filter(b * b, g) - mu_b ** 2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def bit_accuracy(w_in, w_out) -> float:
    """Fraction of equal bits between two equally-shaped bit arrays."""
    w_in = np.asarray(getattr(w_in, "data", w_in))
    w_out = np.asarray(getattr(w_out, "data", w_out))
    if w_in.shape != w_out.shape:
        raise ValueError(f"bit_accuracy: length mismatch {w_in.shape} vs {w_out.shape}")
    if w_in.size == 0:
        raise ValueError("bit_accuracy of empty messages")
    return float(np.count_nonzero(w_in.astype(np.int64) == w_out.astype(np.int64)) / w_in.size)


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    bar: float
    n_images: int
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)
