"""Expected optimal-transport alignment targets.

Given per-sample class probability vectors and a target distribution over
classes, the minimum-cost matching between samples and a drawn sequence of
target classes defines, in expectation over i.i.d. draws, a soft target q
per sample. The expectation is taken either by exact enumeration (feasible
when K^N is small) or by Monte Carlo averaging.

When the cost structure has no ties, the optimal matching depends on a draw
only through its class counts, so draws are grouped by their count vector
and one assignment is solved per group. With ties (e.g. duplicated
probability rows) the matching is resolved per ordered draw, preferring the
lexicographically smallest permutation (sample 1 takes the earliest drawn
slot among optimal choices), which keeps the expectation symmetric across
exchangeable samples.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from .errors import BudgetExceededError

# Cost gap below which assignments are considered tied. In ot_assign, ties
# resolve to the lexicographically smallest label vector (lowest sample index
# gets the lowest class index); in ordered draws they resolve to the smallest
# permutation.
TIE_TOL = 1e-9

EXACT_ENUM_BUDGET = 200_000  # maximum K**N for exact enumeration
ORDERED_TIE_BUDGET = 20_000  # maximum K**N for the per-ordered-draw tie path
# Beyond this batch size the Monte-Carlo tie path falls back to count
# grouping with the canonical count-based tie-break (per-draw resolution of
# every sampled ordered draw would dominate the runtime).
ORDERED_TIE_MAX_N = 10
DEFAULT_MC_DRAWS = 10_000


@dataclass(frozen=True)
class TargetDistribution:
    """Target class distribution, optionally applied within subgroups of a
    second attribute (conditional alignment)."""

    probs: np.ndarray
    classes: tuple | None = None
    conditional_on: str | None = None
    attribute: str | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise ValueError("probs must be a 1-d vector with K >= 2 entries")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be nonnegative and sum to 1 within 1e-9")
        object.__setattr__(self, "probs", probs)
        if self.classes is not None and len(self.classes) != probs.size:
            raise ValueError("classes must match probs length")

    @property
    def num_classes(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class OTTargetBatch:
    """Per-sample expected-OT targets: soft q, hard y = argmax q, c = max q."""

    q: np.ndarray
    y: np.ndarray
    c: np.ndarray
    method: str


def _cost_matrix(probs: np.ndarray) -> np.ndarray:
    n, k = probs.shape
    eye = np.eye(k)
    diff = probs[:, None, :] - eye[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _min_completion(cost: np.ndarray, counts: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    cols = np.repeat(np.arange(counts.size), counts)
    expanded = cost[:, cols]
    rows, picks = linear_sum_assignment(expanded)
    return float(expanded[rows, picks].sum())


def ot_assign(probs: np.ndarray, counts) -> np.ndarray:
    """Assign one class per sample, minimizing the total Euclidean distance
    between probability vectors and the one-hot labels of a class multiset.

    counts[k] is the number of samples that must receive class k. Ties are
    broken toward the lexicographically smallest label vector.
    """
    probs = np.asarray(probs, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    n, k = probs.shape
    if counts.size != k or np.any(counts < 0):
        raise ValueError("counts must be K nonnegative integers")
    if counts.sum() != n:
        raise ValueError(f"counts sum {counts.sum()} != number of samples {n}")
    cost = _cost_matrix(probs)
    cols = np.repeat(np.arange(k), counts)
    expanded = cost[:, cols]
    rows, picks = linear_sum_assignment(expanded)
    if not _has_cost_ties(cost):
        # Unique optimum: the matching is already canonical.
        labels = np.empty(n, dtype=np.int64)
        labels[rows] = cols[picks]
        return labels
    best = float(expanded[rows, picks].sum())

    labels = np.empty(n, dtype=np.int64)
    remaining = counts.copy()
    prefix = 0.0
    for i in range(n):
        for cls in range(k):
            if remaining[cls] == 0:
                continue
            remaining[cls] -= 1
            tail = _min_completion(cost[i + 1 :], remaining)
            if prefix + cost[i, cls] + tail <= best + TIE_TOL:
                labels[i] = cls
                prefix += cost[i, cls]
                break
            remaining[cls] += 1
        else:
            raise AssertionError("no feasible class found; tie tolerance too tight")
    return labels


def assignment_cost(probs: np.ndarray, labels: np.ndarray) -> float:
    cost = _cost_matrix(np.asarray(probs, dtype=np.float64))
    return float(cost[np.arange(len(labels)), labels].sum())


def _iter_count_vectors(n: int, k: int):
    """All ways to split n draws among k classes."""
    if k == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in _iter_count_vectors(n - first, k - 1):
            yield (first, *rest)


def _has_cost_ties(cost: np.ndarray, tol: float = TIE_TOL) -> bool:
    """Conservative tie detector: any cost-neutral 2-cycle (and, for small
    problems with K >= 3, 3-cycle) means the optimal matching may be
    non-unique and draws must be resolved in order."""
    n, k = cost.shape
    if n < 2:
        return False
    for a in range(k):
        for b in range(a + 1, k):
            d = cost[:, a] - cost[:, b]
            gaps = np.abs(d[:, None] - d[None, :])
            np.fill_diagonal(gaps, np.inf)
            if gaps.min() <= 2 * tol:
                return True
    if k >= 3 and n <= 8:
        idx = range(n)
        for i, j, l in itertools.permutations(idx, 3):
            for a, b, c in itertools.permutations(range(k), 3):
                base = cost[i, a] + cost[j, b] + cost[l, c]
                rot = cost[i, b] + cost[j, c] + cost[l, a]
                if abs(base - rot) <= 3 * tol:
                    return True
    return False


def _assign_ordered_draw(cost: np.ndarray, draw: np.ndarray) -> np.ndarray:
    """Min-cost matching of samples to the slots of one ordered draw.

    Ties prefer the lexicographically smallest permutation: sample 1 takes
    the earliest drawn slot among those compatible with a minimum-cost
    completion, and so on. Returns the class label per sample.
    """
    n = cost.shape[0]
    slot_cost = cost[:, draw]
    rows, picks = linear_sum_assignment(slot_cost)
    best = float(slot_cost[rows, picks].sum())
    taken = np.zeros(n, dtype=bool)
    labels = np.empty(n, dtype=np.int64)
    prefix = 0.0
    for i in range(n):
        for j in range(n):
            if taken[j]:
                continue
            taken[j] = True
            free = ~taken
            tail = 0.0
            if i + 1 < n:
                sub = slot_cost[i + 1 :][:, free]
                r, c = linear_sum_assignment(sub)
                tail = float(sub[r, c].sum())
            if prefix + slot_cost[i, j] + tail <= best + TIE_TOL:
                labels[i] = draw[j]
                prefix += slot_cost[i, j]
                break
            taken[j] = False
        else:
            raise AssertionError("no feasible slot found; tie tolerance too tight")
    return labels


def _count_log_prob(counts: np.ndarray, probs: np.ndarray) -> float:
    if np.any((counts > 0) & (probs == 0.0)):
        return -np.inf
    n = counts.sum()
    logp = gammaln(n + 1) - gammaln(counts + 1).sum()
    nz = counts > 0
    logp += float(np.sum(counts[nz] * np.log(probs[nz])))
    return float(logp)


def expected_ot_targets(
    probs: np.ndarray,
    target: TargetDistribution,
    method: str = "exact_enumeration",
    num_draws: int = DEFAULT_MC_DRAWS,
    seed: int = 0,
    budget: int = EXACT_ENUM_BUDGET,
) -> OTTargetBatch:
    """Average the optimal assignment over i.i.d. draws of target multisets."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probs must be (N, K)")
    n, k = probs.shape
    if k != target.num_classes:
        raise ValueError(f"probs have {k} classes but target has {target.num_classes}")

    cost = _cost_matrix(probs)
    tied = _has_cost_ties(cost)
    q = np.zeros((n, k), dtype=np.float64)

    if method == "exact_enumeration":
        if k**n > budget:
            raise BudgetExceededError(
                f"exact enumeration needs K^N = {k}^{n} > {budget} draws; "
                "use method='monte_carlo'"
            )
        label = "exact_enumeration"
        if tied:
            if k**n > ORDERED_TIE_BUDGET:
                raise BudgetExceededError(
                    f"tied costs require ordered enumeration of K^N = {k}^{n} "
                    f"draws (> {ORDERED_TIE_BUDGET}); use method='monte_carlo'"
                )
            for draw in itertools.product(range(k), repeat=n):
                draw = np.asarray(draw, dtype=np.int64)
                logp = float(np.sum(np.log(target.probs[draw])))
                if logp == -np.inf:
                    continue
                labels = _assign_ordered_draw(cost, draw)
                q[np.arange(n), labels] += math.exp(logp)
        else:
            for counts in _iter_count_vectors(n, k):
                counts = np.asarray(counts, dtype=np.int64)
                logp = _count_log_prob(counts, target.probs)
                if logp == -np.inf:
                    continue
                labels = ot_assign(probs, counts)
                q[np.arange(n), labels] += math.exp(logp)
    elif method == "monte_carlo":
        label = f"monte_carlo({num_draws})"
        rng = np.random.default_rng(seed)
        draws = rng.choice(k, size=(num_draws, n), p=target.probs)
        if tied and n <= ORDERED_TIE_MAX_N:
            uniq, freq = np.unique(draws, axis=0, return_counts=True)
            for draw, f in zip(uniq, freq):
                labels = _assign_ordered_draw(cost, draw)
                q[np.arange(n), labels] += f / num_draws
        else:
            counts_per_draw = (draws[:, :, None] == np.arange(k)).sum(axis=1)
            uniq, freq = np.unique(counts_per_draw, axis=0, return_counts=True)
            for counts, f in zip(uniq, freq):
                labels = ot_assign(probs, counts)
                q[np.arange(n), labels] += f / num_draws
    else:
        raise ValueError(f"unknown method {method!r}")

    y = np.argmax(q, axis=1)
    c = q.max(axis=1)
    return OTTargetBatch(q=q, y=y, c=c, method=label)
