"""Attribute classifiers on the region slice.

Training-role and evaluation-role classifiers intentionally differ in seed
and in one architecture hyperparameter (hidden width), mirroring the use of
separate classifiers for finetuning and for measuring its effect.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import TrainingFailedError

log = logging.getLogger(__name__)

ROLE_HIDDEN = {"training": 16, "evaluation": 24}
ROLE_SEED_OFFSET = {"training": 0, "evaluation": 10_000}


class AttributeClassifier(nn.Module):
    """Small MLP mapping a region slice to K class logits; frozen after fit."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int, seed: int, role: str,
                 attribute: str = "attr"):
        super().__init__()
        if role not in ROLE_HIDDEN:
            raise ValueError(f"role must be one of {tuple(ROLE_HIDDEN)}, got {role!r}")
        self.role = role
        self.attribute = attribute
        self.num_classes = num_classes
        self.hidden = hidden
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        dt = torch.float64
        self.lin1 = nn.Linear(in_dim, hidden, dtype=dt)
        self.lin2 = nn.Linear(hidden, num_classes, dtype=dt)
        for lin in (self.lin1, self.lin2):
            nn.init.normal_(lin.weight, std=1.0 / np.sqrt(lin.in_features), generator=gen)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(torch.tanh(self.lin1(x)))

    def descriptor(self) -> dict:
        return {
            "role": self.role,
            "attribute": self.attribute,
            "hidden": self.hidden,
            "seed": self.seed,
            "num_classes": self.num_classes,
        }

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        with torch.no_grad():
            pred = self(torch.as_tensor(features, dtype=torch.float64)).argmax(dim=-1).numpy()
        return float(np.mean(pred == labels))


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    role: str,
    seed: int = 0,
    attribute: str = "attr",
    iterations: int = 400,
    lr: float = 0.05,
    min_accuracy: float = 0.99,
    label_smoothing: float = 0.1,
    noise_augment: float = 0.5,
) -> AttributeClassifier:
    """Fit a frozen classifier meeting the accuracy bar on held-out data.

    Label smoothing keeps the output probabilities graded rather than
    saturated at 0/1; the transport-based target generation relies on that
    ranking signal (and argmax accuracy is unaffected). Gaussian input
    augmentation smooths the decision boundary so that finetuned samples
    cannot flip the prediction without genuinely crossing between attribute
    modes (the classifier-fooling failure mode).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    split = max(1, int(0.8 * n))
    tr, va = order[:split], order[split:]
    if va.size == 0:
        va = tr

    clf = AttributeClassifier(
        features.shape[1], num_classes,
        hidden=ROLE_HIDDEN[role], seed=seed + ROLE_SEED_OFFSET[role],
        role=role, attribute=attribute,
    )
    xt = torch.as_tensor(features[tr])
    yt = torch.as_tensor(labels[tr])
    gen = torch.Generator().manual_seed(seed + 555)
    optim = torch.optim.Adam(clf.parameters(), lr=lr)
    for it in range(iterations):
        xb = xt
        if noise_augment > 0:
            xb = xt + noise_augment * torch.empty_like(xt).normal_(generator=gen)
        logits = clf(xb)
        loss = nn.functional.cross_entropy(logits, yt, label_smoothing=label_smoothing)
        if not torch.isfinite(loss):
            raise TrainingFailedError(f"non-finite classifier loss at iteration {it}")
        optim.zero_grad()
        loss.backward()
        optim.step()

    acc = clf.accuracy(features[va], labels[va])
    if acc < min_accuracy:
        raise TrainingFailedError(
            f"{role} classifier for {attribute!r} reached accuracy {acc:.4f} "
            f"< required {min_accuracy}"
        )
    for p in clf.parameters():
        p.requires_grad_(False)
    clf.eval()
    log.info("trained %s classifier for %s: held-out accuracy %.4f", role, attribute, acc)
    return clf
