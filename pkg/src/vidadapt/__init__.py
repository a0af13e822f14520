"""Temporal-consistency toolkit for multi-frame latent diffusion editing.

Low-rank temporal adapters trained with a frame-similarity loss, bilateral
filtered DDIM inversion and shared/unshared prompt tokens, wired into a small
self-contained pipeline that can be checked against analytic oracles.
"""

from vidadapt.schedule import (
    NoiseSchedule,
    NoiseSpec,
    add_noise,
    analytic_gaussian_denoiser,
    build_schedule,
    ddim_denoise_step,
    ddim_invert_step,
)
from vidadapt.bilateral import BilateralConfig, bilateral_filter

__all__ = [
    "BilateralConfig",
    "NoiseSchedule",
    "NoiseSpec",
    "add_noise",
    "analytic_gaussian_denoiser",
    "bilateral_filter",
    "build_schedule",
    "ddim_denoise_step",
    "ddim_invert_step",
]

__version__ = "0.1.0"
