"""Bidirectional knowledge permeation between patch features and a prompt embedding.

Both directions share one set of query/key/value maps and one MLP.
Shapes: patch features ``Z`` are ``(B, M, d)``, prompt embeddings ``T`` are
``(B, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from ._seeding import seeded_init

DIRECTIONS = ("bi", "t2v", "v2t", "none")
FUSIONS = ("cross_attention", "dot", "add", "concat")


@dataclass(frozen=True)
class BKPConfig:
    mu: float = 0.2
    hidden_ratio: int = 2
    # "bi": both; "t2v": text into vision only; "v2t": vision into text only
    direction: str = "bi"
    fusion: str = "cross_attention"
    # "key" normalises text->vision attention over the (single) text token,
    # "query" normalises it over the M patches instead
    text_softmax_axis: str = "key"

    @property
    def enabled(self) -> bool:
        return self.fusion != "concat" and not (
            self.fusion == "cross_attention" and self.direction == "none"
        )

    def validate(self) -> None:
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.text_softmax_axis not in ("key", "query"):
            raise ValueError("text_softmax_axis must be 'key' or 'query'")


class KnowledgePermeation(nn.Module):
    def __init__(self, dim: int, mu: float = 0.2, hidden_ratio: int = 2,
                 text_softmax_axis: str = "key", seed: int = 0):
        super().__init__()
        self.dim = dim
        self.mu = mu
        self.text_softmax_axis = text_softmax_axis
        with seeded_init(seed, "init", 3):
            self.w_q = nn.Linear(dim, dim, bias=False)
            self.w_k = nn.Linear(dim, dim, bias=False)
            self.w_v = nn.Linear(dim, dim, bias=False)
            self.mlp = nn.Sequential(
                nn.Linear(dim, hidden_ratio * dim), nn.GELU(), nn.Linear(hidden_ratio * dim, dim)
            )

    def _check(self, z: torch.Tensor, t: torch.Tensor) -> None:
        if z.dim() != 3 or t.dim() != 2 or z.shape[0] != t.shape[0] \
                or z.shape[-1] != self.dim or t.shape[-1] != self.dim:
            raise ValueError(
                f"expected Z (B, M, {self.dim}) and T (B, {self.dim}), "
                f"got {tuple(z.shape)} and {tuple(t.shape)}"
            )

    def text_to_vision(self, z: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return textual-guided patches ``(B, M, d)`` and the map ``A_Z`` ``(B, M, 1)``."""
        self._check(z, t)
        t = t[:, None, :]
        logits = self.w_q(z) @ self.w_k(t).transpose(1, 2) / math.sqrt(self.dim)
        axis = -1 if self.text_softmax_axis == "key" else 1
        attn = torch.softmax(logits, dim=axis)
        return z + self.mu * self.mlp(attn @ self.w_v(t)), attn

    def vision_to_text(self, t: torch.Tensor, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the visual-enhanced prompt ``(B, d)`` and the map ``A_T`` ``(B, 1, M)``."""
        self._check(z, t)
        logits = self.w_q(t[:, None, :]) @ self.w_k(z).transpose(1, 2) / math.sqrt(self.dim)
        attn = torch.softmax(logits, dim=-1)
        return t + self.mu * self.mlp(attn @ self.w_v(z))[:, 0], attn

    def permeate(self, z: torch.Tensor, t: torch.Tensor, direction: str = "bi"):
        """Both directions read the original ``(Z, T)``; returns ``(Z_hat, T_hat, A_Z, A_T)``."""
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        z_hat, a_z = self.text_to_vision(z, t) if direction in ("bi", "t2v") else (z, None)
        t_hat, a_t = self.vision_to_text(t, z) if direction in ("bi", "v2t") else (t, None)
        return z_hat, t_hat, a_z, a_t


def fuse_variant(z: torch.Tensor, t: torch.Tensor, kind: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Parameter-free fusion baselines. ``concat`` leaves both streams untouched;
    the prompt token is appended by the joint encoder either way."""
    if kind == "dot":
        return z * t[:, None, :], t * z.mean(dim=1)
    if kind == "add":
        return z + t[:, None, :], t + z.mean(dim=1)
    if kind == "concat":
        return z, t
    raise ValueError(f"unknown fusion kind {kind!r}")
