"""YAML run configuration: defaults, file loading, and key overrides.

A run resolves its configuration once (defaults <- file <- --set overrides)
and writes the resolved copy next to its outputs, so every artifact records
exactly what produced it.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .errors import ConfigurationError

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "world": {
        "num_train_contexts": 20,
        "num_validation_contexts": 3,
        "num_heldout_contexts": 5,
        "attributes": [["attr", 2]],
        "bias": [0.9, 0.1],
        "bias_rows": None,
        "data_dim": 8,
        "noise_scale": 0.25,
        "mode_separation": 2.0,
        "context_scale": 1.0,
        "seed": 7,
        "num_samples": 12000,
        "sample_seed": 1,
    },
    "schedule": {"T": 100, "beta_start": 1.0e-3, "beta_end": 0.2, "kind": "linear"},
    "model": {"ctx_dim": 8, "hidden_dim": 96, "time_dim": 8, "prefix_len": 2, "num_layers": 2, "seed": 11},
    "classifiers": {
        "train_seed": 3,
        "eval_seed": 4,
        "min_accuracy": 0.99,
        "iterations": 400,
        "noise_augment": 0.5,
    },
    "pretrain": {
        "iterations": 4000,
        "batch_size": 128,
        "lr": 1.0e-3,
        "context_dropout": 0.1,
        "seed": 5,
    },
    "sampler": {
        "num_steps": 21,
        "step_jitter": [19, 20, 21, 22, 23],
        "guidance_weight": None,
        "stochastic": False,
    },
    "loss": {
        "confidence_threshold": 0.6,
        "lambda_face": 0.1,
        "lambda_img_1": 4.0,
        "lambda_img_2": 0.8,
        "lambda_img_3": 0.16,
        "extractor_seed": 21,
        "embed_seed": 77,
        "reference_size": 512,
        "reference_seed": 123,
        "targets": [{"attribute": "attr", "probs": [0.5, 0.5], "conditional_on": None}],
    },
    "finetune": {
        "finetune_target": "context_table",
        "adapter_rank": 4,
        "optimizer": "adam",
        "lr": 5.0e-3,
        "weight_decay": 0.0,
        "iterations": 2400,
        "batch_size": 24,
        "checkpoint_every": 200,
        "grad_mode": "adjusted",
        "seed": 42,
        "prompt_families": None,
        "family_weights": None,
        "min_semantics": 0.7,
    },
    "evaluate": {"n_per_context": 400, "seed": 2, "extractor_seed": 121},
    "diagnose": {"runs": 20, "seed": 9, "context": 0},
    "invert": {
        "iterations": 120,
        "lr": 0.05,
        "batch_size": 8,
        "stochastic": True,
        "seeds": [0, 1, 2],
        "context": 0,
        "target_seed": 33,
    },
}


def _merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigurationError(f"unknown configuration key: {where}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Resolve DEFAULT_CONFIG with an optional YAML file and key=value pairs.

    Override keys use dotted paths (e.g. ``finetune.lr=0.01``); values are
    parsed as YAML scalars.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        cfg = _merge(cfg, loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown configuration section: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown configuration key: {key}")
        node[parts[-1]] = value
    return cfg


def write_resolved(cfg: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def config_digest(cfg: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
