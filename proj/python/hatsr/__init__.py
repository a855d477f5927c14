"""Hybrid attention transformer for image super-resolution."""

from ._core import (
    Model,
    augment,
    bicubic_downsample,
    complexity,
    diffusion_index,
    gini,
    presets,
    psnr_y,
    ssim_y,
)

__all__ = [
    "Model",
    "augment",
    "bicubic_downsample",
    "complexity",
    "diffusion_index",
    "gini",
    "presets",
    "psnr_y",
    "ssim_y",
]
