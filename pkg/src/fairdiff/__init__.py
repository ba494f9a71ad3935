"""Distributional alignment finetuning for a toy conditional diffusion model."""

from .schedule import NoiseSchedule, build_noise_schedule, forward_diffuse, reverse_step
from .model import Denoiser, state_hash
from .sampler import SamplerConfig, sample, strided_timesteps, adjacent_timesteps
from .dft import (
    GradCoefficients,
    compute_grad_coefficients,
    sample_with_adjusted_grad,
    sample_with_naive_grad,
)
from .diagnostics import GradDiagnostics, diagnose_gradients
from .pretrain import PretrainOptions, pretrain_denoiser

__all__ = [
    "NoiseSchedule",
    "build_noise_schedule",
    "forward_diffuse",
    "reverse_step",
    "Denoiser",
    "state_hash",
    "SamplerConfig",
    "sample",
    "strided_timesteps",
    "adjacent_timesteps",
    "GradCoefficients",
    "compute_grad_coefficients",
    "sample_with_adjusted_grad",
    "sample_with_naive_grad",
    "GradDiagnostics",
    "diagnose_gradients",
    "PretrainOptions",
    "pretrain_denoiser",
]
