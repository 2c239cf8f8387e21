from .distortions import (
    apply,
    blur_kernel_size,
    crop_keep,
    cropout_mix,
    dropout_mix,
    gaussian_blur,
    gaussian_kernel1d,
    gaussian_noise,
    rectangle_side,
    resize_cycle,
    sample_and_apply,
)
from .jpeg import calibrate_mask_threshold, jpeg_real, jpeg_sim, quant_tables
from .specs import FULL_POOL, NoiseKind, NoisePool, NoiseSpec, parse_noise_list, parse_noise_spec

__all__ = [
    "FULL_POOL",
    "NoiseKind",
    "NoisePool",
    "NoiseSpec",
    "apply",
    "blur_kernel_size",
    "calibrate_mask_threshold",
    "crop_keep",
    "cropout_mix",
    "dropout_mix",
    "gaussian_blur",
    "gaussian_kernel1d",
    "gaussian_noise",
    "jpeg_real",
    "jpeg_sim",
    "parse_noise_list",
    "parse_noise_spec",
    "quant_tables",
    "rectangle_side",
    "resize_cycle",
    "sample_and_apply",
]
