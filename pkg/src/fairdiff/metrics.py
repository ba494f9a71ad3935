"""Bias metric and the model evaluation protocol."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .model import Denoiser
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule
from .world import ToyWorld


def bias_metric(freqs) -> float:
    """Mean absolute pairwise difference of group frequencies.

    Normalized by the number of contrasting pairs K(K-1)/2; 0 means all
    groups equally represented, larger means more disparity.
    """
    f = np.asarray(freqs, dtype=np.float64)
    k = f.size
    if k < 2:
        raise ValueError("bias metric needs at least 2 groups")
    if np.any(f < 0) or f.sum() > 1.0 + 1e-9:
        raise ValueError("frequencies must be nonnegative and sum to at most 1")
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    total = sum(abs(f[i] - f[j]) for i, j in pairs)
    return float(total / len(pairs))


def semantics_cosines(x: torch.Tensor, o: torch.Tensor, extractors) -> np.ndarray:
    """Per-sample mean feature cosine over the given extractors."""
    with torch.no_grad():
        cosines = []
        for ext in extractors:
            fa, fb = ext(x), ext(o)
            na = torch.linalg.vector_norm(fa, dim=-1)
            nb = torch.linalg.vector_norm(fb, dim=-1)
            denom = torch.clamp(na * nb, min=1e-300)
            cosines.append(((fa * fb).sum(-1) / denom).numpy())
    return np.mean(cosines, axis=0)


def evaluate_model(
    model: Denoiser,
    frozen_model: Denoiser | None,
    world: ToyWorld,
    contexts,
    eval_classifiers: dict,
    n_per_context: int,
    schedule: NoiseSchedule,
    sampler_config: SamplerConfig,
    extractors,
    seed: int = 0,
) -> dict:
    """Per-context attribute frequencies, bias, and semantics similarity.

    Frequencies come from the evaluation classifiers' argmax on the region
    slice of generated samples. Semantics compares the model's outputs with
    the frozen model's outputs for the same initial noise, via the mean
    feature cosine of the given extractor pair. The report is JSON-ready.
    """
    contexts = list(contexts)
    if not contexts:
        raise ValueError("no contexts to evaluate")
    region = list(world.spec.region)
    per_context: dict = {}
    bias_by_attr: dict = {attr: [] for attr in eval_classifiers}
    freq_by_attr: dict = {attr: [] for attr in eval_classifiers}
    sem_means = []

    for cid in contexts:
        gen = torch.Generator().manual_seed(seed * 100_003 + int(cid))
        z_T = torch.empty(n_per_context, model.data_dim, dtype=torch.float64).normal_(
            generator=gen
        )
        x = sample(model, int(cid), z_T, schedule, sampler_config)
        entry: dict = {"freqs": {}, "bias": {}}
        x_region = x[:, region]
        for attr, clf in eval_classifiers.items():
            with torch.no_grad():
                pred = clf(x_region).argmax(dim=-1).numpy()
            freqs = np.bincount(pred, minlength=clf.num_classes) / n_per_context
            entry["freqs"][attr] = [float(v) for v in freqs]
            entry["bias"][attr] = bias_metric(freqs)
            bias_by_attr[attr].append(entry["bias"][attr])
            freq_by_attr[attr].append(freqs)
        if frozen_model is not None:
            o = sample(frozen_model, int(cid), z_T, schedule, sampler_config)
            sims = semantics_cosines(x, o, extractors)
            entry["semantics"] = {"mean": float(sims.mean()), "min": float(sims.min())}
            sem_means.append(float(sims.mean()))
        per_context[str(int(cid))] = entry

    report: dict = {
        "contexts": per_context,
        "n_per_context": int(n_per_context),
        "seed": int(seed),
        "bias": {},
        "freq_stats": {},
    }
    for attr in eval_classifiers:
        arr = np.asarray(bias_by_attr[attr])
        report["bias"][attr] = {"mean": float(arr.mean()), "std": float(arr.std())}
        fr = np.stack(freq_by_attr[attr])
        report["freq_stats"][attr] = {
            "mean": [float(v) for v in fr.mean(axis=0)],
            "std": [float(v) for v in fr.std(axis=0)],
        }
    if sem_means:
        sm = np.asarray(sem_means)
        report["semantics"] = {"mean": float(sm.mean()), "std": float(sm.std())}
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(render_report(report))


def render_report(report: dict) -> str:
    """Canonical JSON rendering: reloading and re-rendering is byte-stable."""
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
