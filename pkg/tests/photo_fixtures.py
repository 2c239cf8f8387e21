"""Natural-image fixtures cut from scikit-image's bundled sample photos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from wmdenoise.imaging import resize_array, save_image

_COLOR = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "hubble_deep_field", "retina")
_GRAY = ("camera", "brick", "grass", "gravel", "coins")


def _sources() -> list[np.ndarray]:
    import skimage.data as data

    out = []
    for name in _COLOR:
        out.append(getattr(data, name)()[..., :3].transpose(2, 0, 1) / 255.0)
    for name in _GRAY:
        g = getattr(data, name)() / 255.0
        out.append(np.repeat(g[None], 3, axis=0))
    return out


def photo_patches(n: int, size: int, seed: int = 0, crop: int | None = None) -> np.ndarray:
    """``n`` random crops (side ``crop``, default 2·size) resized to size×size."""
    rng = np.random.default_rng(seed)
    sources = _sources()
    crop = crop or 2 * size
    out = []
    for i in range(n):
        src = sources[(i + int(rng.integers(len(sources)))) % len(sources)]
        top = int(rng.integers(0, src.shape[1] - crop + 1))
        left = int(rng.integers(0, src.shape[2] - crop + 1))
        patch = src[:, top:top + crop, left:left + crop]
        if rng.random() < 0.5:
            patch = patch[:, :, ::-1]
        out.append(resize_array(patch, size, size))
    return np.clip(np.stack(out), 0, 1).astype(np.float32)


def write_patches(directory: Path, images: np.ndarray, prefix: str = "img") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_image(img, directory / f"{prefix}_{i:03d}.png")
    return directory
