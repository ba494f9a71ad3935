"""Composite finetuning loss: distributional alignment, semantics
preservation, realism preservation, and dynamic weighting.

The semantics and realism terms compare frozen random feature maps standing
in for pretrained image encoders. Dynamic image weights follow the agreement
rule: a sample whose alignment target matches the frozen model's class keeps
a uniform strong weight; a sample that needs editing gets a weaker weight off
the attribute region and the weakest on it, realized by evaluating the
feature dissimilarity on region-masked inputs.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import BudgetExceededError, ConfigurationError
from .ot import (
    DEFAULT_MC_DRAWS,
    EXACT_ENUM_BUDGET,
    OTTargetBatch,
    TargetDistribution,
    expected_ot_targets,
)

log = logging.getLogger(__name__)


class FeatureExtractor(nn.Module):
    """Frozen randomly initialized feature map (pretrained-encoder analog)."""

    def __init__(self, in_dim: int, out_dim: int = 16, hidden: int = 32, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        dt = torch.float64
        self.lin1 = nn.Linear(in_dim, hidden, dtype=dt)
        self.lin2 = nn.Linear(hidden, out_dim, dtype=dt)
        for lin in (self.lin1, self.lin2):
            nn.init.normal_(lin.weight, std=1.0 / np.sqrt(lin.in_features), generator=gen)
            nn.init.normal_(lin.bias, std=0.1, generator=gen)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(torch.tanh(self.lin1(x)))


def make_extractor_pair(in_dim: int, seed: int = 0) -> tuple[FeatureExtractor, FeatureExtractor]:
    """Two independent frozen extractors (the two-view structure)."""
    return FeatureExtractor(in_dim, seed=seed * 2 + 1), FeatureExtractor(in_dim, seed=seed * 2 + 2)


def _pairwise_cosine(fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine; rows with a zero-norm factor get cosine 0 (logged)."""
    na = torch.linalg.vector_norm(fa, dim=-1)
    nb = torch.linalg.vector_norm(fb, dim=-1)
    denom = na * nb
    ok = denom > 0
    cos = torch.zeros_like(denom)
    if ok.any():
        cos = torch.where(ok, (fa * fb).sum(-1) / torch.where(ok, denom, torch.ones_like(denom)), cos)
    if (~ok).any():
        log.warning("zero-norm feature vector: dissimilarity defined as 1 for %d sample(s)",
                    int((~ok).sum()))
    return cos


def semantics_dissim(x: torch.Tensor, o: torch.Tensor, extractors) -> torch.Tensor:
    """Per-sample sum over extractors of (1 - cos(feat(x), feat(o)))."""
    if x.ndim == 1:
        x = x.unsqueeze(0)
        o = o.unsqueeze(0)
    total = torch.zeros(x.shape[0], dtype=x.dtype)
    for ext in extractors:
        total = total + (1.0 - _pairwise_cosine(ext(x), ext(o)))
    return total


def semantics_loss(x: torch.Tensor, o: torch.Tensor, extractors) -> torch.Tensor:
    """Batch mean of the two-extractor feature dissimilarity."""
    return semantics_dissim(x, o, extractors).mean()


def realism_loss(region_x: torch.Tensor, reference_set: torch.Tensor, embed) -> torch.Tensor:
    """Batch mean of 1 - max over reference faces of the embedding cosine."""
    if reference_set is None or reference_set.shape[0] == 0:
        raise ConfigurationError("realism loss requires a nonempty reference set")
    if region_x.ndim == 1:
        region_x = region_x.unsqueeze(0)
    emb_x = embed(region_x)
    with torch.no_grad():
        emb_ref = embed(reference_set)
        ref_norm = torch.linalg.vector_norm(emb_ref, dim=-1, keepdim=True)
        emb_ref = emb_ref / torch.clamp(ref_norm, min=1e-30)
    x_norm = torch.linalg.vector_norm(emb_x, dim=-1, keepdim=True)
    ok = (x_norm.squeeze(-1) > 0)
    unit_x = emb_x / torch.clamp(x_norm, min=1e-30)
    cos = unit_x @ emb_ref.T
    best = cos.max(dim=-1).values
    best = torch.where(ok, best, torch.zeros_like(best))
    if (~ok).any():
        log.warning("zero-norm region embedding: realism dissimilarity set to 1 "
                    "for %d sample(s)", int((~ok).sum()))
    return (1.0 - best).mean()


def alignment_loss(logits: torch.Tensor, targets: OTTargetBatch, C: float) -> torch.Tensor:
    """(1/N) sum of confidence-gated cross-entropy against the hard targets.

    The targets are constants; gradient flows only through the logits.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be (N, K)")
    n = logits.shape[0]
    mask = np.asarray(targets.c) >= C
    if not mask.any():
        return torch.zeros((), dtype=logits.dtype)
    idx = torch.as_tensor(np.nonzero(mask)[0], dtype=torch.long)
    y = torch.as_tensor(np.asarray(targets.y)[mask], dtype=torch.long)
    ce = nn.functional.cross_entropy(logits[idx], y, reduction="sum")
    return ce / n


@dataclass
class LossConfig:
    """Weights, threshold, region mask and target distributions."""

    confidence_threshold: float = 0.8
    lambda_face: float = 1.0
    lambda_img_1: float = 8.0
    lambda_img_2: float = 1.6
    lambda_img_3: float = 0.32
    region: tuple[int, ...] = ()
    targets: tuple[TargetDistribution, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigurationError("confidence_threshold must lie in [0, 1]")
        for name in ("lambda_face", "lambda_img_1", "lambda_img_2", "lambda_img_3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not self.lambda_img_1 >= self.lambda_img_2 >= self.lambda_img_3:
            warnings.warn(
                "expected lambda_img_1 >= lambda_img_2 >= lambda_img_3 "
                f"(got {self.lambda_img_1}, {self.lambda_img_2}, {self.lambda_img_3})",
                stacklevel=2,
            )
        self.region = tuple(int(i) for i in self.region)
        if isinstance(self.targets, TargetDistribution):
            self.targets = (self.targets,)
        else:
            self.targets = tuple(self.targets)


def dynamic_weights(y: int, frozen_class: int, region, cfg: LossConfig, data_dim: int) -> np.ndarray:
    """Per-coordinate weight map for the semantics term of one sample."""
    w = np.full(data_dim, cfg.lambda_img_1, dtype=np.float64)
    if int(y) != int(frozen_class):
        w[:] = cfg.lambda_img_2
        w[list(region)] = cfg.lambda_img_3
    return w


def _resolve_classifier(classifiers, attribute):
    if callable(classifiers) and not isinstance(classifiers, dict):
        return classifiers
    if attribute is None:
        if len(classifiers) == 1:
            return next(iter(classifiers.values()))
        raise ConfigurationError("multiple classifiers given; target must name its attribute")
    try:
        return classifiers[attribute]
    except KeyError:
        raise ConfigurationError(f"no classifier for attribute {attribute!r}") from None


def _targets_for_batch(
    probs: np.ndarray,
    target: TargetDistribution,
    partition: np.ndarray | None,
    method: str,
    mc_draws: int,
    seed: int,
) -> OTTargetBatch:
    """Expected-OT targets, optionally computed within conditioning subgroups."""
    n, k = probs.shape

    def run(sub_probs, sub_seed):
        m = method
        if m == "auto":
            m = "exact_enumeration" if k ** sub_probs.shape[0] <= EXACT_ENUM_BUDGET else "monte_carlo"
        try:
            return expected_ot_targets(sub_probs, target, method=m, num_draws=mc_draws, seed=sub_seed)
        except BudgetExceededError:
            return expected_ot_targets(
                sub_probs, target, method="monte_carlo", num_draws=mc_draws, seed=sub_seed
            )

    if partition is None:
        return run(probs, seed)
    q = np.zeros((n, k))
    labels = sorted(set(int(g) for g in partition))
    for j, g in enumerate(labels):
        idx = np.nonzero(partition == g)[0]
        if idx.size == 0:
            continue
        sub = run(probs[idx], seed + 1 + j)
        q[idx] = sub.q
    y = np.argmax(q, axis=1)
    c = q.max(axis=1)
    return OTTargetBatch(q=q, y=y, c=c, method="conditional")


def total_loss(
    batch_x: torch.Tensor,
    batch_o: torch.Tensor,
    cfg: LossConfig,
    classifiers,
    extractors,
    embed=None,
    reference_set: torch.Tensor | None = None,
    ot_method: str = "auto",
    mc_draws: int = DEFAULT_MC_DRAWS,
    seed: int = 0,
):
    """Alignment + dynamically weighted semantics + realism.

    classifiers: one frozen classifier, or a dict attribute -> classifier.
    Returns (loss, breakdown). The breakdown carries detached floats plus the
    generated target batches for logging.
    """
    n = batch_x.shape[0]
    breakdown: dict = {"n": n}

    if len(cfg.region) == 0:
        # No detectable region: only the semantics term applies.
        img = cfg.lambda_img_1 * semantics_dissim(batch_x, batch_o, extractors).mean()
        breakdown.update(
            align=0.0, img=float(img.detach()), face=0.0, agree=n, skipped_region=True
        )
        return img, breakdown

    region = list(cfg.region)
    x_region = batch_x[:, region]
    o_region = batch_o[:, region]

    needed = set()
    for tgt in cfg.targets:
        needed.add(tgt.attribute)
        if tgt.conditional_on is not None:
            needed.add(tgt.conditional_on)
    frozen_classes: dict = {}
    with torch.no_grad():
        for attr in needed:
            clf = _resolve_classifier(classifiers, attr)
            frozen_classes[attr] = clf(o_region).argmax(dim=-1).numpy()

    align = torch.zeros((), dtype=batch_x.dtype)
    target_batches = []
    agree = np.ones(n, dtype=bool)
    for j, tgt in enumerate(cfg.targets):
        clf = _resolve_classifier(classifiers, tgt.attribute)
        logits = clf(x_region)
        probs = torch.softmax(logits, dim=-1).detach().numpy()
        partition = frozen_classes[tgt.conditional_on] if tgt.conditional_on else None
        batch_targets = _targets_for_batch(
            probs, tgt, partition, ot_method, mc_draws, seed + 101 * j
        )
        align = align + alignment_loss(logits, batch_targets, cfg.confidence_threshold)
        target_batches.append(batch_targets)
        agree &= batch_targets.y == frozen_classes[tgt.attribute]

    agree_t = torch.as_tensor(agree)
    sem_full = semantics_dissim(batch_x, batch_o, extractors)
    if bool(agree.all()):
        img_per_sample = cfg.lambda_img_1 * sem_full
    else:
        on_mask = torch.zeros(batch_x.shape[-1], dtype=batch_x.dtype)
        on_mask[region] = 1.0
        off_mask = 1.0 - on_mask
        sem_on = semantics_dissim(batch_x * on_mask, batch_o * on_mask, extractors)
        sem_off = semantics_dissim(batch_x * off_mask, batch_o * off_mask, extractors)
        img_per_sample = torch.where(
            agree_t,
            cfg.lambda_img_1 * sem_full,
            cfg.lambda_img_2 * sem_off + cfg.lambda_img_3 * sem_on,
        )
    img = img_per_sample.mean()

    if cfg.lambda_face > 0:
        face = realism_loss(x_region, reference_set, embed)
    else:
        face = torch.zeros((), dtype=batch_x.dtype)

    loss = align + img + cfg.lambda_face * face
    breakdown.update(
        align=float(align.detach()),
        img=float(img.detach()),
        face=float(face.detach()),
        agree=int(agree.sum()),
        targets=target_batches,
    )
    return loss, breakdown
