"""Distortion descriptors and their CLI/config string syntax."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class NoiseKind(enum.Enum):
    IDENTITY = "identity"
    DROPOUT = "dropout"
    CROPOUT = "cropout"
    CROP = "crop"
    GAUSSIAN_BLUR = "blur"
    GAUSSIAN_NOISE = "gnoise"
    RESIZE = "resize"
    JPEG_SIM = "jpeg_sim"
    JPEG_REAL = "jpeg"


_VALID = {
    NoiseKind.DROPOUT: (lambda v: 0.0 <= v <= 1.0, "a replacement fraction in [0, 1]"),
    NoiseKind.CROPOUT: (lambda v: 0.0 < v <= 1.0, "a kept-area fraction in (0, 1]"),
    NoiseKind.CROP: (lambda v: 0.0 < v <= 1.0, "a kept-area fraction in (0, 1]"),
    NoiseKind.GAUSSIAN_BLUR: (lambda v: v >= 0.0, "a sigma >= 0"),
    NoiseKind.GAUSSIAN_NOISE: (lambda v: v >= 0.0, "a sigma >= 0"),
    NoiseKind.RESIZE: (lambda v: 0.0 < v <= 1.0, "a scale in (0, 1]"),
    NoiseKind.JPEG_SIM: (lambda v: 1.0 <= v <= 100.0, "a quality in [1, 100]"),
    NoiseKind.JPEG_REAL: (lambda v: 1.0 <= v <= 100.0, "a quality in [1, 100]"),
}


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    intensity: float = 0.0

    def __post_init__(self):
        if not isinstance(self.kind, NoiseKind):
            object.__setattr__(self, "kind", NoiseKind(self.kind))
        object.__setattr__(self, "intensity", float(self.intensity))
        rule = _VALID.get(self.kind)
        if rule and not rule[0](self.intensity):
            raise ValueError(f"{self.kind.value}: intensity {self.intensity} must be {rule[1]}")

    @property
    def differentiable(self) -> bool:
        return self.kind is not NoiseKind.JPEG_REAL

    def __str__(self) -> str:
        if self.kind is NoiseKind.IDENTITY:
            return "identity"
        return f"{self.kind.value}:{self.intensity:g}"


def parse_noise_spec(text: str) -> NoiseSpec:
    """Parse ``kind[:intensity]``, e.g. ``dropout:0.3`` or ``jpeg:50``."""
    text = text.strip()
    name, _, value = text.partition(":")
    try:
        kind = NoiseKind(name.strip().lower())
    except ValueError:
        known = ", ".join(k.value for k in NoiseKind)
        raise ValueError(f"unknown noise kind '{name}' (known: {known})") from None
    if kind is NoiseKind.IDENTITY:
        if value:
            raise ValueError("identity takes no intensity")
        return NoiseSpec(kind)
    if not value:
        raise ValueError(f"'{text}': {kind.value} needs an intensity, e.g. {kind.value}:0.5")
    try:
        intensity = float(value)
    except ValueError:
        raise ValueError(f"'{text}': intensity '{value}' is not a number") from None
    return NoiseSpec(kind, intensity)


def parse_noise_list(text: str) -> list[NoiseSpec]:
    return [parse_noise_spec(part) for part in text.split(",") if part.strip()]


# Default training distortions: dropout 30%, blur σ=2, JPEG 50,
# resize 0.8 and a 3.5% crop.
FULL_POOL = "dropout:0.3,blur:2.0,jpeg_sim:50,resize:0.8,crop:0.035"


@dataclass
class NoisePool:
    specs: Sequence[NoiseSpec]
    weights: Optional[Sequence[float]] = None

    def __post_init__(self):
        self.specs = list(self.specs)
        if not self.specs:
            raise ValueError("noise pool must contain at least one distortion")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(self.specs),) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("pool weights must be non-negative, one per spec, not all zero")
            self.weights = list(w / w.sum())

    @classmethod
    def parse(cls, text: str) -> "NoisePool":
        return cls(parse_noise_list(text))

    def choose(self, rng: np.random.Generator) -> NoiseSpec:
        if self.weights is None:
            return self.specs[int(rng.integers(len(self.specs)))]
        return self.specs[int(rng.choice(len(self.specs), p=self.weights))]

    def __str__(self) -> str:
        return ",".join(str(s) for s in self.specs)
