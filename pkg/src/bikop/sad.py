"""Prototype channel filtering with max-of-m Gumbel-Softmax samples."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ._seeding import seeded_init

FILTER_MODES = ("hard", "soft")


@dataclass(frozen=True)
class SADConfig:
    enabled: bool = True
    n_samples: int | None = None  # None -> dim // 2
    temperature: float = 1.0
    depth: int = 2
    hidden_ratio: int = 2
    mode: str = "hard"
    eval_prototype: str = "relevant"

    def resolved_samples(self, dim: int) -> int:
        return self.n_samples if self.n_samples is not None else max(1, dim // 2)

    def validate(self) -> None:
        if self.n_samples is not None and self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.mode not in FILTER_MODES:
            raise ValueError(f"mode must be one of {FILTER_MODES}")
        if self.eval_prototype not in ("relevant", "full"):
            raise ValueError("eval_prototype must be 'relevant' or 'full'")


def sample_gumbel(shape, generator: torch.Generator | None = None,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(torch.finfo(torch.float64).tiny, 1.0 - 1e-16)
    return (-torch.log(-torch.log(u))).to(dtype)


class FilterNet(nn.Module):
    def __init__(self, dim: int, n_samples: int | None = None, temperature: float = 1.0,
                 depth: int = 2, hidden_ratio: int = 2, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.n_samples = n_samples if n_samples is not None else max(1, dim // 2)
        self.temperature = temperature
        layers: list[nn.Module] = []
        width = dim
        with seeded_init(seed, "init", 4):
            for i in range(depth):
                out = dim if i == depth - 1 else hidden_ratio * dim
                layers.append(nn.Linear(width, out))
                if i < depth - 1:
                    layers.append(nn.GELU())
                width = out
        self.mlp = nn.Sequential(*layers)

    def forward(self, prototypes: torch.Tensor) -> torch.Tensor:
        # parameter-free standardisation on both sides: scoring is cosine, so the
        # filter only sees direction, and unit-scale logits keep the Gumbel draws
        # from saturating into a single channel under the large SAD learning rate
        shape = prototypes.shape[-1:]
        logits = F.layer_norm(self.mlp(F.layer_norm(prototypes, shape)), shape)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("filter logits are not finite")
        return logits

    def sample_filter(self, prototypes: torch.Tensor, generator: torch.Generator | None = None,
                      hard: bool = True, noise: torch.Tensor | None = None) -> torch.Tensor:
        """Channel filter in ``[0, 1]``: element-wise max over m Gumbel-Softmax draws.

        In hard mode the forward value is the max of one-hot draws (exactly 0/1)
        and gradients flow through the relaxed draws. ``noise`` of shape
        ``(..., m, dim)`` replaces fresh Gumbel noise.
        """
        logits = self(prototypes)
        if noise is None:
            noise = sample_gumbel((*logits.shape[:-1], self.n_samples, self.dim), generator, logits.dtype)
        soft = torch.softmax((logits.unsqueeze(-2) + noise) / self.temperature, dim=-1)
        soft_max = soft.max(dim=-2).values
        if not hard:
            return soft_max
        one_hot = torch.zeros_like(soft).scatter_(-1, soft.argmax(dim=-1, keepdim=True), 1.0)
        return one_hot.max(dim=-2).values + (soft_max - soft_max.detach())

    def eval_filter(self, prototypes: torch.Tensor) -> torch.Tensor:
        """Deterministic indicator of the top-m logits; ties go to the lower channel index."""
        logits = self(prototypes)
        k = min(self.n_samples, self.dim)
        order = torch.sort(logits, dim=-1, descending=True, stable=True).indices[..., :k]
        return torch.zeros_like(logits).scatter_(-1, order, 1.0)


def disentangle(prototypes: torch.Tensor, filters: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split into class-relevant ``p * f`` and class-irrelevant ``p * (1 - f)`` parts."""
    if prototypes.shape != filters.shape:
        raise ValueError(f"shape mismatch {tuple(prototypes.shape)} vs {tuple(filters.shape)}")
    return prototypes * filters, prototypes * (1.0 - filters)
