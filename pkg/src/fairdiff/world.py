"""Synthetic attribute-labeled world with a controllable bias table.

Data are Gaussian mode mixtures in R^d. Attribute identity is carried only by
the region coordinates (the face analog), along per-attribute directions that
are orthogonal to the context variation there, so a linear probe on the
region slice can reach near-perfect accuracy on every context, including
held-out ones. Context identity shifts every coordinate.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ToyWorldSpec:
    num_train_contexts: int = 20
    num_validation_contexts: int = 3
    num_heldout_contexts: int = 5
    attributes: tuple = (("attr", 2),)
    # One probability row per context over the attribute-combination space
    # (row-major by attribute order). None selects a single shared row.
    bias_rows: np.ndarray | None = None
    shared_bias: tuple = (0.9, 0.1)
    data_dim: int = 8
    region: tuple = ()
    noise_scale: float = 0.25
    mode_separation: float = 2.0
    context_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if (
            self.num_train_contexts < 1
            or self.num_validation_contexts < 0
            or self.num_heldout_contexts < 0
        ):
            raise ConfigurationError("context counts must be positive")
        attrs = tuple((str(n), int(k)) for n, k in self.attributes)
        if any(k < 2 for _, k in attrs):
            raise ConfigurationError("every attribute needs at least 2 classes")
        object.__setattr__(self, "attributes", attrs)
        region = tuple(int(i) for i in self.region)
        if not region:
            region = tuple(range(int(np.ceil(self.data_dim / 2))))
        if len(region) == 0 or min(region) < 0 or max(region) >= self.data_dim:
            raise ConfigurationError("region must be nonempty and within [0, d)")
        object.__setattr__(self, "region", region)
        if len(region) < len(attrs):
            raise ConfigurationError("region must have at least one coordinate per attribute")

    @property
    def num_contexts(self) -> int:
        return self.num_train_contexts + self.num_validation_contexts + self.num_heldout_contexts

    @property
    def train_contexts(self) -> tuple:
        return tuple(range(self.num_train_contexts))

    @property
    def validation_contexts(self) -> tuple:
        """Used for checkpoint selection, never for training or reporting."""
        lo = self.num_train_contexts
        return tuple(range(lo, lo + self.num_validation_contexts))

    @property
    def heldout_contexts(self) -> tuple:
        lo = self.num_train_contexts + self.num_validation_contexts
        return tuple(range(lo, self.num_contexts))

    @property
    def combos(self) -> tuple:
        return tuple(itertools.product(*[range(k) for _, k in self.attributes]))

    @property
    def num_combos(self) -> int:
        return int(np.prod([k for _, k in self.attributes]))


@dataclass
class ToyWorld:
    spec: ToyWorldSpec
    bias_rows: np.ndarray = field(init=False)
    mode_centers: np.ndarray = field(init=False)  # (M, num_combos, d)

    def __post_init__(self):
        spec = self.spec
        m, d = spec.num_contexts, spec.data_dim
        combos = spec.combos

        rows = spec.bias_rows
        if rows is None:
            rows = np.tile(np.asarray(spec.shared_bias, dtype=np.float64), (m, 1))
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (m, spec.num_combos):
            raise ConfigurationError(
                f"bias_rows must be ({m}, {spec.num_combos}), got {rows.shape}"
            )
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigurationError("every bias row must be a probability vector")
        self.bias_rows = rows

        rng = np.random.default_rng(spec.seed)
        region = np.asarray(spec.region)
        r = region.size
        # Orthonormal attribute directions within the region subspace.
        basis, _ = np.linalg.qr(rng.standard_normal((r, r)))
        attr_dirs = basis[:, : len(spec.attributes)].T  # (J, r)

        contexts = spec.context_scale * rng.standard_normal((m, d))
        # Remove the context component along attribute directions so the
        # attribute stays linearly identifiable across contexts.
        proj = contexts[:, region] @ attr_dirs.T
        contexts[:, region] -= proj @ attr_dirs

        centers = np.repeat(contexts[:, None, :], len(combos), axis=1)
        for ci, combo in enumerate(combos):
            offset = np.zeros(r)
            for j, ((_, kj), cls) in enumerate(zip(spec.attributes, combo)):
                coef = (cls - (kj - 1) / 2.0) * spec.mode_separation
                offset += coef * attr_dirs[j]
            centers[:, ci, region] += offset
        self.mode_centers = centers

        sep = self._min_combo_separation()
        if sep < 4.0 * spec.noise_scale - 1e-12:
            raise ConfigurationError(
                f"mode separation {sep:.3f} on the region subspace is below "
                f"4 * noise_scale = {4 * spec.noise_scale:.3f}"
            )

    def _min_combo_separation(self) -> float:
        region = np.asarray(self.spec.region)
        c0 = self.mode_centers[0][:, region]
        dists = np.linalg.norm(c0[:, None, :] - c0[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        return float(dists.min())

    def combo_index(self, attr_classes) -> int:
        return self.spec.combos.index(tuple(int(a) for a in attr_classes))

    def attr_of_combo(self, combo_idx: int) -> tuple:
        return self.spec.combos[int(combo_idx)]


@dataclass
class ToyDataset:
    x0: np.ndarray        # (N, d)
    context: np.ndarray   # (N,)
    attrs: np.ndarray     # (N, J) per-attribute class
    combo: np.ndarray     # (N,)

    def __len__(self):
        return self.x0.shape[0]


def make_world(spec: ToyWorldSpec) -> ToyWorld:
    return ToyWorld(spec=spec)


def sample_dataset(
    world: ToyWorld,
    n: int,
    seed: int = 0,
    contexts=None,
) -> ToyDataset:
    """Draw n samples: context uniform (over `contexts` or all), attribute
    combination per the context's bias row, x0 = mode center + noise."""
    spec = world.spec
    rng = np.random.default_rng(seed)
    pool = np.asarray(contexts if contexts is not None else range(spec.num_contexts))
    ctx = pool[rng.integers(0, pool.size, size=n)]
    combos = np.empty(n, dtype=np.int64)
    for c in np.unique(ctx):
        mask = ctx == c
        combos[mask] = rng.choice(spec.num_combos, size=int(mask.sum()), p=world.bias_rows[c])
    x0 = world.mode_centers[ctx, combos] + spec.noise_scale * rng.standard_normal(
        (n, spec.data_dim)
    )
    attrs = np.asarray([world.attr_of_combo(ci) for ci in combos], dtype=np.int64)
    return ToyDataset(x0=x0, context=ctx, attrs=attrs, combo=combos)


def reference_regions(world: ToyWorld, n: int = 512, seed: int = 123) -> np.ndarray:
    """Region slices drawn from the true data distribution (external faces)."""
    ds = sample_dataset(world, n, seed=seed)
    return ds.x0[:, list(world.spec.region)]


def write_dataset(ds: ToyDataset, path, attribute_names) -> None:
    """One JSON record per sample: x, context, and named attribute classes."""
    path = Path(path)
    with path.open("w") as fh:
        for i in range(len(ds)):
            rec = {
                "x": [float(v) for v in ds.x0[i]],
                "context": int(ds.context[i]),
                "attrs": {name: int(ds.attrs[i, j]) for j, name in enumerate(attribute_names)},
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path, attributes) -> ToyDataset:
    """Inverse of write_dataset. `attributes` are (name, K) pairs so the
    row-major combination index can be rebuilt."""
    names = [n for n, _ in attributes]
    sizes = [k for _, k in attributes]
    xs, ctxs, attrs = [], [], []
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            xs.append(rec["x"])
            ctxs.append(rec["context"])
            attrs.append([rec["attrs"][name] for name in names])
    x0 = np.asarray(xs, dtype=np.float64)
    context = np.asarray(ctxs, dtype=np.int64)
    attr_arr = np.asarray(attrs, dtype=np.int64).reshape(len(xs), len(names))
    combo = np.zeros(len(xs), dtype=np.int64)
    for j, k in enumerate(sizes):
        combo = combo * k + attr_arr[:, j]
    return ToyDataset(x0=x0, context=context, attrs=attr_arr, combo=combo)
