"""Checkpoint files: versioned header, parameter blob, config snapshot.

Pretrain checkpoints carry the full model state. Finetune checkpoints carry
only the finetuned parameter subset plus a content hash of the frozen
remainder; loading one requires the base model and verifies the hash.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .errors import ConfigurationError
from .model import Denoiser, state_hash

FORMAT_VERSION = 1


def save_pretrain_checkpoint(path, model: Denoiser, config: dict, iteration: int,
                             metrics: dict | None = None) -> Path:
    payload = {
        "version": FORMAT_VERSION,
        "kind": "pretrain",
        "arch": model.arch_descriptor(),
        "state": model.state_dict(),
        "config": config,
        "iteration": iteration,
        "metrics": metrics or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def save_finetune_checkpoint(path, model: Denoiser, target: str, config: dict,
                             iteration: int, metrics: dict | None = None) -> Path:
    group = model.parameter_group(target)
    payload = {
        "version": FORMAT_VERSION,
        "kind": "finetune",
        "arch": model.arch_descriptor(),
        "finetune_target": target,
        "state": {name: p.detach().clone() for name, p in group.items()},
        "frozen_hash": state_hash(model, exclude=tuple(group)),
        "config": config,
        "iteration": iteration,
        "metrics": metrics or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), weights_only=False)
    if payload.get("version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint {path} has version {payload.get('version')}, "
            f"expected {FORMAT_VERSION}"
        )
    return payload


def model_from_pretrain(payload: dict) -> Denoiser:
    if payload["kind"] != "pretrain":
        raise ConfigurationError("expected a pretrain checkpoint")
    arch = dict(payload["arch"])
    arch.pop("adapter_rank", None)
    model = Denoiser(**arch)
    model.load_state_dict(payload["state"])
    return model


def apply_finetune(base: Denoiser, payload: dict) -> Denoiser:
    """Overlay a finetune checkpoint onto a base model (hash-verified)."""
    if payload["kind"] != "finetune":
        raise ConfigurationError("expected a finetune checkpoint")
    model = base.frozen_copy()
    if payload["finetune_target"] == "low_rank_adapter":
        rank = payload["arch"].get("adapter_rank") or 1
        model.enable_adapter(rank, seed=payload["config"]["finetune"].get("adapter_seed", 0))
    group = model.parameter_group(payload["finetune_target"])
    expected = state_hash(model, exclude=tuple(group))
    if expected != payload["frozen_hash"]:
        raise ConfigurationError(
            "frozen-parameter hash mismatch: finetune checkpoint does not "
            "belong to this base model"
        )
    with torch.no_grad():
        for name, tensor in payload["state"].items():
            group[name].copy_(tensor)
    return model
