"""Reverse-process sampling with optional classifier-free guidance.

A single loop implements plain sampling and both gradient-carrying variants
(see dft.py); they differ only in how each step treats the computation graph,
so the produced values are bit-identical for identical inputs and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .model import Denoiser
from .schedule import NoiseSchedule, reverse_step


def strided_timesteps(T: int, S: int) -> tuple[int, ...]:
    """S timesteps from T down to 0, evenly spaced after rounding."""
    if S < 2:
        raise ConfigurationError(f"need at least 2 timesteps, got S={S}")
    ts = np.round(np.linspace(T, 0, S)).astype(int)
    if np.any(np.diff(ts) >= 0):
        raise ConfigurationError(f"cannot place {S} strictly decreasing steps in [0, {T}]")
    return tuple(int(t) for t in ts)


def adjacent_timesteps(T: int) -> tuple[int, ...]:
    return tuple(range(T, -1, -1))


@dataclass(frozen=True)
class SamplerConfig:
    timesteps: tuple[int, ...]
    guidance_weight: float | None = None
    stochastic: bool = False
    step_jitter: tuple[int, ...] | None = None

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if len(ts) < 2:
            raise ConfigurationError("timesteps must contain at least [T, 0]")
        if ts[-1] != 0:
            raise ConfigurationError(f"timesteps must end at 0, got {ts[-1]}")
        if any(nxt >= cur for cur, nxt in zip(ts[:-1], ts[1:])):
            raise ConfigurationError("timesteps must be strictly decreasing")
        if self.guidance_weight is not None and self.guidance_weight < 0:
            raise ConfigurationError("guidance_weight must be >= 0")
        if self.step_jitter is not None:
            jitter = tuple(int(s) for s in self.step_jitter)
            if any(s < 2 for s in jitter):
                raise ConfigurationError("every step_jitter entry must be >= 2")
            object.__setattr__(self, "step_jitter", jitter)
        if self.stochastic and any(a - b != 1 for a, b in zip(ts[:-1], ts[1:])):
            raise ConfigurationError("stochastic sampling requires adjacent timesteps")

    @property
    def num_steps(self) -> int:
        return len(self.timesteps)

    @classmethod
    def strided(cls, T: int, S: int, **kw) -> "SamplerConfig":
        return cls(timesteps=strided_timesteps(T, S), **kw)

    @classmethod
    def adjacent(cls, T: int, **kw) -> "SamplerConfig":
        return cls(timesteps=adjacent_timesteps(T), **kw)

    def validate_against(self, schedule: NoiseSchedule):
        if self.timesteps[0] != schedule.T:
            raise ConfigurationError(
                f"timesteps must start at T={schedule.T}, got {self.timesteps[0]}"
            )


def predict_eps(
    model: Denoiser,
    context_ids: torch.Tensor,
    z: torch.Tensor,
    t: int,
    guidance_weight: float | None,
) -> torch.Tensor:
    """Noise prediction, optionally guided: eps_u + w (eps_c - eps_u).

    w == 1 returns the conditional prediction exactly and w == 0 the
    unconditional one, with no floating-point recombination.
    """
    if guidance_weight is None:
        return model(context_ids, z, t)
    w = float(guidance_weight)
    if w == 1.0:
        return model(context_ids, z, t)
    null_ids = torch.full_like(context_ids, model.null_context_id)
    eps_u = model(null_ids, z, t)
    if w == 0.0:
        return eps_u
    eps_c = model(context_ids, z, t)
    return eps_u + w * (eps_c - eps_u)


class _ScaleGrad(torch.autograd.Function):
    """Identity in the forward pass; multiplies the gradient by a constant."""

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def run_reverse_process(
    model: Denoiser,
    context_ids: torch.Tensor,
    z_T: torch.Tensor,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    generator: torch.Generator | None = None,
    grad_mode: str = "none",
    grad_scales=None,
) -> torch.Tensor:
    """Iterate reverse_step over config.timesteps.

    grad_mode:
      none     — no gradient bookkeeping (values identical to the others);
      naive    — plain autodiff through the full recurrence;
      adjusted — each noise prediction sees a detached z (its input is a
                 constant w.r.t. the parameters) and its backward gradient is
                 scaled by grad_scales[i]; the linear scheduler chain itself
                 stays differentiable so every step still contributes.
    """
    config.validate_against(schedule)
    ts = config.timesteps
    z = z_T
    for i in range(len(ts) - 1):
        t, t_prev = ts[i], ts[i + 1]
        z_in = z if grad_mode == "naive" else z.detach()
        eps = predict_eps(model, context_ids, z_in, t, config.guidance_weight)
        if grad_mode == "adjusted" and grad_scales is not None:
            eps = _ScaleGrad.apply(eps, float(grad_scales[i]))
        w_t = None
        if config.stochastic and t_prev > 0:
            w_t = torch.empty_like(z).normal_(generator=generator)
        z = reverse_step(z, eps, t, t_prev, schedule, w_t, config.stochastic)
    return z


def sample(
    model: Denoiser,
    context,
    z_T: torch.Tensor,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Generate x0 from initial noise. Pure function of its inputs."""
    squeeze = z_T.ndim == 1
    if squeeze:
        z_T = z_T.unsqueeze(0)
    if z_T.shape[-1] != model.data_dim:
        raise ValueError(f"z_T dim {z_T.shape[-1]} != model data_dim {model.data_dim}")
    context_ids = _as_context_ids(context, z_T.shape[0])
    with torch.no_grad():
        x0 = run_reverse_process(model, context_ids, z_T, schedule, config, generator)
    return x0.squeeze(0) if squeeze else x0


def _as_context_ids(context, batch: int) -> torch.Tensor:
    if torch.is_tensor(context):
        return context.to(torch.long)
    return torch.full((batch,), int(context), dtype=torch.long)
