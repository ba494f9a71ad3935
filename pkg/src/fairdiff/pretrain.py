"""Standard denoising pretraining for the toy conditional model."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch

from .errors import TrainingFailedError
from .model import Denoiser
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)


@dataclass
class PretrainOptions:
    iterations: int = 4000
    batch_size: int = 128
    lr: float = 1e-3
    context_dropout: float = 0.1  # probability of training the null row (CFG)
    seed: int = 0
    log_every: int = 500


def pretrain_denoiser(
    x0: torch.Tensor,
    contexts: torch.Tensor,
    model: Denoiser,
    schedule: NoiseSchedule,
    opts: PretrainOptions,
) -> Denoiser:
    """Minimize MSE between predicted and injected noise over random t.

    Trains in place and returns the model. A non-finite loss aborts with
    TrainingFailedError carrying the last finite parameter state.
    """
    n = x0.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if contexts.shape[0] != n:
        raise ValueError("contexts and x0 must have matching first dimension")
    x0 = x0.to(torch.float64)
    contexts = contexts.to(torch.long)
    if opts.iterations == 0:
        return model

    gen = torch.Generator().manual_seed(opts.seed)
    optim = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=opts.lr)
    last_finite = None
    for it in range(opts.iterations):
        idx = torch.randint(0, n, (min(opts.batch_size, n),), generator=gen)
        batch_x = x0[idx]
        batch_c = contexts[idx].clone()
        if opts.context_dropout > 0:
            drop = torch.rand(batch_c.shape, generator=gen) < opts.context_dropout
            batch_c[drop] = model.null_context_id
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        noise = torch.empty_like(batch_x).normal_(generator=gen)
        z_t = forward_diffuse(batch_x, t, noise, schedule)
        pred = model(batch_c, z_t, t)
        loss = torch.mean((pred - noise) ** 2)
        if not torch.isfinite(loss):
            raise TrainingFailedError(
                f"non-finite pretraining loss at iteration {it}",
                last_checkpoint=last_finite,
            )
        optim.zero_grad()
        loss.backward()
        optim.step()
        if it % 50 == 0:
            last_finite = copy.deepcopy(model.state_dict())
        if opts.log_every and it % opts.log_every == 0:
            log.info("pretrain iter %d loss %.5f (t=%d)", it, loss.item(), t)
    return model


def denoising_mse(
    x0: torch.Tensor,
    contexts: torch.Tensor,
    model: Denoiser,
    schedule: NoiseSchedule,
    seed: int = 0,
    samples_per_t: int = 4,
) -> float:
    """Average denoising MSE over a fixed grid of timesteps (evaluation aid)."""
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for t in range(1, schedule.T + 1):
            for _ in range(samples_per_t):
                noise = torch.empty_like(x0).normal_(generator=gen)
                z_t = forward_diffuse(x0, t, noise, schedule)
                pred = model(contexts, z_t, t)
                total += float(torch.mean((pred - noise) ** 2))
                count += 1
    return total / count
