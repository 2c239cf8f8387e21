"""Image ingestion and PNG output.

Batches are float32 arrays shaped B×3×H×W with values in [0, 1].
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .autodiff.functional import bilinear_matrix
from .autodiff.tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
ROLES = ("cover", "encoded", "noised", "residual")


def resize_array(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a C×H×W array (same sampling as the noise layer)."""
    if img.shape[1:] == (h, w):
        return img
    rows = bilinear_matrix(img.shape[1], h)
    cols = bilinear_matrix(img.shape[2], w)
    return rows @ img @ cols.T


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Decode one PNG/PPM into a 3×H×W float64 array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "1", "P", "LA"):
            im = im.convert("L")
            arr = np.asarray(im, dtype=np.float64)[None]
            arr = np.repeat(arr, 3, axis=0)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    return arr / 255.0


def list_images(dir_path: Union[str, Path]) -> list[Path]:
    root = Path(dir_path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_images(dir_path: Union[str, Path], target_h: int, target_w: int) -> np.ndarray:
    """Load every PNG/PPM in ``dir_path`` (lexicographic order) as one batch.

    Unreadable files are skipped with a warning.  Grayscale images are
    replicated to three channels.
    """
    batch = []
    for path in list_images(dir_path):
        try:
            img = read_image(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        batch.append(resize_array(img, target_h, target_w))
    if not batch:
        raise ValueError(f"no readable PNG/PPM images in {dir_path}")
    return np.clip(np.stack(batch), 0.0, 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] floats to 8-bit with round-half-up (0.5 → 128)."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img, path: Union[str, Path]) -> Path:
    """Write a 3×H×W (or 1×3×H×W) image as an 8-bit RGB PNG."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"save_image takes one image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3×H×W image, got shape {arr.shape}")
    path = Path(path)
    Image.fromarray(to_uint8(arr).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    return path


def residual_visual(cover, encoded, gain: float = 5.0) -> np.ndarray:
    """Gray-centred amplified embedding residual, clamped to [0, 1]."""
    cover = np.asarray(cover.data if isinstance(cover, Tensor) else cover, dtype=np.float64)
    encoded = np.asarray(encoded.data if isinstance(encoded, Tensor) else encoded, dtype=np.float64)
    if cover.shape != encoded.shape:
        raise ValueError(f"shape mismatch {cover.shape} vs {encoded.shape}")
    return np.clip(0.5 + gain * (encoded - cover), 0.0, 1.0)


def save_triptych(cover, encoded, out_dir: Union[str, Path], stem: str = "image",
                  gain: float = 5.0) -> dict[str, Path]:
    """Save cover, encoded and residual views as three separate PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "cover": save_image(cover, out_dir / f"{stem}_cover.png"),
        "encoded": save_image(encoded, out_dir / f"{stem}_encoded.png"),
        "residual": save_image(residual_visual(cover, encoded, gain), out_dir / f"{stem}_residual.png"),
    }
