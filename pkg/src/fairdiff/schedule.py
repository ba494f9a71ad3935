"""Variance schedules and the elementary diffusion steps.

Conventions: timesteps are 1-indexed, t in [1, T]. Internally arrays are
stored 0-indexed, so ``betas[t - 1]`` is the variance added at step t.
``alpha_bar(0)`` is defined as 1 (the clean-data limit), which makes the
strided deterministic update well defined for a final step onto t=0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError

SCHEDULE_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha_bar/sigma sequences for T steps."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigurationError("betas must be a nonempty 1-d sequence")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigurationError("every beta_t must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))
        object.__setattr__(self, "sigmas", np.sqrt(betas))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas up to step t; alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigmas[t - 1])

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")


def build_noise_schedule(
    T: int,
    beta_start: float = 1e-3,
    beta_end: float = 0.2,
    kind: str = "linear",
) -> NoiseSchedule:
    """Interpolate T betas between beta_start and beta_end.

    ``linear`` interpolates beta directly; ``scaled_linear`` interpolates
    sqrt(beta) and squares, the convention used by latent-diffusion stacks.
    """
    if not isinstance(T, int) or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    elif kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    return NoiseSchedule(betas=betas)


def forward_diffuse(
    x0: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def reverse_step(
    z_t: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    w_t: torch.Tensor | None = None,
    stochastic: bool = False,
) -> torch.Tensor:
    """One reverse update from step t to t_prev.

    Adjacent stochastic steps use the ancestral posterior-mean update

        z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)
                  + sigma_t * w_t.

    Strided steps use the deterministic clean-estimate projection

        x0_hat  = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
        z_prev  = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps.

    Stochastic strided steps are not supported.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if stochastic:
        if t_prev != t - 1:
            raise ConfigurationError(
                "stochastic sampling supports adjacent steps only; "
                f"got stride {t - t_prev}"
            )
        abar = schedule.alpha_bar(t)
        mean = (z_t - schedule.beta(t) / np.sqrt(1.0 - abar) * eps) / np.sqrt(schedule.alpha(t))
        if w_t is None:
            return mean
        return mean + schedule.sigma(t) * w_t
    abar = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    x0_hat = (z_t - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)
    return np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * eps
