"""Conditional noise-prediction network for vector-valued toy data.

The conditioning pathway mimics a text-to-image stack at desk scale:

* ``context_table`` — one learnable row per context identifier (the prompt),
  plus a reserved null row used for classifier-free guidance;
* ``ctx_encoder`` / ``ctx_encoder_p`` — a learnable shared map applied to
  every table row (the text-encoder analog). Because it is shared, finetuning
  it moves the effective embedding of contexts never seen during finetuning,
  which is what lets debiasing generalize to held-out contexts. The second
  head feeds the prefix slot and starts at exactly zero: it stays inactive
  during pretraining, so the modulation directions it controls remain
  untrained spares. Pretraining smooths the model's response along the
  directions conditioning actually varied in (which makes them poor levers
  for changing behavior later); the spare directions keep their full
  leverage, mirroring how prompt-side finetuning of a large model pushes
  embeddings into response modes never exercised by natural prompts;
* ``prefix`` — learnable vectors concatenated ahead of the encoded context
  (the soft-prompt analog), zero-initialized so the base model is unchanged
  until they are trained;
* ``trunk`` — a small MLP predicting the noise. The conditioning vector
  modulates every hidden layer both additively and multiplicatively
  (FiLM style), the MLP analog of cross-attention conditioning; this gives
  prompt-side finetuning enough leverage to rewarp the learned field, not
  merely translate it. Linear layers optionally carry low-rank adapters with
  effective weight = base + A @ B exactly.

Everything runs in float64 so the gradient oracles in the test-suite can use
tight tolerances.
"""

from __future__ import annotations

import copy
import hashlib
import math

import torch
from torch import nn

FINETUNE_TARGETS = ("context_table", "prefix", "full_network", "low_rank_adapter")


def time_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of the raw integer timestep, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class LoRAAdapter(nn.Module):
    """Additive low-rank factors for one linear layer: delta W = A @ B."""

    def __init__(self, out_features: int, in_features: int, rank: int, generator=None):
        super().__init__()
        a = torch.empty(out_features, rank, dtype=torch.float64)
        nn.init.normal_(a, std=1.0 / math.sqrt(rank), generator=generator)
        self.A = nn.Parameter(a)
        # B starts at zero so enabling the adapter leaves the forward pass
        # bit-identical until training moves it.
        self.B = nn.Parameter(torch.zeros(rank, in_features, dtype=torch.float64))

    def delta(self) -> torch.Tensor:
        return self.A @ self.B


class Denoiser(nn.Module):
    """Noise prediction eps(context, z_t, t) for data vectors of dim d."""

    def __init__(
        self,
        num_contexts: int,
        data_dim: int = 8,
        ctx_dim: int = 8,
        hidden_dim: int = 96,
        time_dim: int = 8,
        prefix_len: int = 2,
        num_layers: int = 2,
        seed: int = 0,
    ):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.num_contexts = num_contexts
        self.data_dim = data_dim
        self.ctx_dim = ctx_dim
        self.hidden_dim = hidden_dim
        self.time_dim = time_dim
        self.prefix_len = prefix_len
        self.num_layers = num_layers
        self.seed = seed

        gen = torch.Generator().manual_seed(seed)
        dt = torch.float64
        # +1 row: reserved null context for classifier-free guidance.
        table = torch.randn(num_contexts + 1, ctx_dim, generator=gen, dtype=dt)
        self.context_table = nn.Embedding(num_contexts + 1, ctx_dim, _weight=table)
        self.ctx_encoder = nn.Linear(ctx_dim, ctx_dim, dtype=dt)
        self.prefix = nn.Parameter(torch.zeros(prefix_len * ctx_dim, dtype=dt))
        # Zero so the head is inert until finetuned; kept out of pretraining
        # via requires_grad (pretraining optimizes only grad-requiring params).
        self.ctx_encoder_p = nn.Linear(ctx_dim, prefix_len * ctx_dim, dtype=dt)
        nn.init.zeros_(self.ctx_encoder_p.weight)
        nn.init.zeros_(self.ctx_encoder_p.bias)
        self.ctx_encoder_p.requires_grad_(False)

        cond_dim = prefix_len * ctx_dim + ctx_dim
        self.cond_dim = cond_dim
        self.lin_in = nn.Linear(data_dim + time_dim, hidden_dim, dtype=dt)
        self.hidden = nn.ModuleList(
            nn.Linear(hidden_dim, hidden_dim, dtype=dt) for _ in range(num_layers - 1)
        )
        self.lin_out = nn.Linear(hidden_dim, data_dim, dtype=dt)
        # Each hidden stage is modulated as h * (1 + gamma(cond)) + beta(cond).
        self.films = nn.ModuleList(
            nn.Linear(cond_dim, 2 * hidden_dim, dtype=dt) for _ in range(num_layers)
        )
        self._init_linears(gen)
        self.adapters: nn.ModuleDict | None = None

    def _adaptable(self) -> dict[str, nn.Linear]:
        out = {
            "ctx_encoder": self.ctx_encoder,
            "ctx_encoder_p": self.ctx_encoder_p,
            "lin_in": self.lin_in,
            "lin_out": self.lin_out,
        }
        for i, lin in enumerate(self.hidden):
            out[f"hidden_{i}"] = lin
        for i, lin in enumerate(self.films):
            out[f"film_{i}"] = lin
        return out

    def _init_linears(self, gen):
        for name, lin in self._adaptable().items():
            if name == "ctx_encoder_p":
                continue
            nn.init.kaiming_uniform_(lin.weight, a=math.sqrt(5), generator=gen)
            bound = 1.0 / math.sqrt(lin.in_features)
            nn.init.uniform_(lin.bias, -bound, bound, generator=gen)

    @property
    def null_context_id(self) -> int:
        return self.num_contexts

    # -- adapter management ------------------------------------------------

    def enable_adapter(self, rank: int, seed: int = 0):
        """Attach low-rank adapters to every linear layer of the model."""
        if rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {rank}")
        gen = torch.Generator().manual_seed(seed)
        adapters = {
            name: LoRAAdapter(lin.out_features, lin.in_features, rank, gen)
            for name, lin in self._adaptable().items()
        }
        self.adapters = nn.ModuleDict(adapters)
        self.adapter_rank = rank

    def disable_adapter(self):
        self.adapters = None

    def _linear(self, name: str, lin: nn.Linear, x: torch.Tensor) -> torch.Tensor:
        if self.adapters is not None and name in self.adapters:
            weight = lin.weight + self.adapters[name].delta()
            return nn.functional.linear(x, weight, lin.bias)
        return nn.functional.linear(x, lin.weight, lin.bias)

    # -- forward -----------------------------------------------------------

    def embed_context(self, context_ids: torch.Tensor) -> torch.Tensor:
        return self._linear("ctx_encoder", self.ctx_encoder, self.context_table(context_ids))

    def conditioning(self, context_ids: torch.Tensor) -> torch.Tensor:
        """Prefix slot (prefix + spare encoder head) next to the embedding."""
        rows = self.context_table(context_ids)
        emb = self._linear("ctx_encoder", self.ctx_encoder, rows)
        slot = self.prefix.unsqueeze(0) + self._linear("ctx_encoder_p", self.ctx_encoder_p, rows)
        return torch.cat([slot, emb], dim=-1)

    def forward(self, context_ids: torch.Tensor, z: torch.Tensor, t) -> torch.Tensor:
        """Predict the injected noise for a batch.

        context_ids: (B,) long; z: (B, d); t: int or (B,) long.
        """
        if z.ndim != 2 or z.shape[-1] != self.data_dim:
            raise ValueError(f"z must be (B, {self.data_dim}), got {tuple(z.shape)}")
        batch = z.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long)
        cond = self.conditioning(context_ids)

        h = torch.cat([z, time_features(t, self.time_dim)], dim=-1)
        h = nn.functional.silu(self._linear("lin_in", self.lin_in, h))
        gamma, beta = self._linear("film_0", self.films[0], cond).chunk(2, dim=-1)
        h = h * (1.0 + gamma) + beta
        for i, lin in enumerate(self.hidden):
            h = nn.functional.silu(self._linear(f"hidden_{i}", lin, h))
            gamma, beta = self._linear(f"film_{i + 1}", self.films[i + 1], cond).chunk(2, dim=-1)
            h = h * (1.0 + gamma) + beta
        return self._linear("lin_out", self.lin_out, h)

    # -- finetuning subsets ------------------------------------------------

    def parameter_group(self, target: str) -> dict[str, nn.Parameter]:
        """Named parameters belonging to one finetune target.

        The ``context_table`` target finetunes the shared context encoder
        only: the per-context rows stay frozen, so any correction must route
        through the shared map and hence generalizes to contexts never seen
        during finetuning (a text encoder has no per-prompt parameters
        either). The rows themselves train during pretraining or under
        ``full_network``.
        """
        if target == "context_table":
            group = {
                "ctx_encoder.weight": self.ctx_encoder.weight,
                "ctx_encoder.bias": self.ctx_encoder.bias,
                "ctx_encoder_p.weight": self.ctx_encoder_p.weight,
                "ctx_encoder_p.bias": self.ctx_encoder_p.bias,
            }
        elif target == "prefix":
            group = {"prefix": self.prefix}
        elif target == "full_network":
            group = {
                name: p
                for name, p in self.named_parameters()
                if name != "prefix" and not name.startswith("adapters.")
            }
        elif target == "low_rank_adapter":
            if self.adapters is None:
                raise ValueError("enable_adapter() before selecting the adapter target")
            group = {
                name: p for name, p in self.named_parameters() if name.startswith("adapters.")
            }
        else:
            raise ValueError(f"unknown finetune target {target!r}; choose {FINETUNE_TARGETS}")
        return group

    def set_trainable(self, target: str) -> list[nn.Parameter]:
        """Freeze everything except the target subset; return its params."""
        group = self.parameter_group(target)
        selected = []
        for name, p in self.named_parameters():
            p.requires_grad_(name in group)
            if name in group:
                selected.append(p)
        return selected

    def frozen_copy(self) -> "Denoiser":
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.requires_grad_(False)
        clone.eval()
        return clone

    def arch_descriptor(self) -> dict:
        return {
            "num_contexts": self.num_contexts,
            "data_dim": self.data_dim,
            "ctx_dim": self.ctx_dim,
            "hidden_dim": self.hidden_dim,
            "time_dim": self.time_dim,
            "prefix_len": self.prefix_len,
            "num_layers": self.num_layers,
            "seed": self.seed,
            "adapter_rank": getattr(self, "adapter_rank", None) if self.adapters else None,
        }


def state_hash(module: nn.Module, exclude: tuple[str, ...] = ()) -> str:
    """Content hash of a module's parameters, skipping excluded name prefixes."""
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        if any(name == e or name.startswith(e + ".") for e in exclude):
            continue
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
