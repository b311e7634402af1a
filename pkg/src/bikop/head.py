"""Prototypes, cosine logits and the classification / adversarial losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    gamma: float = 0.5

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def compute_prototypes(features: torch.Tensor, labels, n_way: int | None = None) -> torch.Tensor:
    """Per-class mean of support features; every class must have the same shot count."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = torch.bincount(labels, minlength=n_way)
    if len(counts) != n_way or (counts != counts[0]).any() or counts[0] == 0:
        raise ValueError(f"uneven or missing shots per class: {counts.tolist()}")
    one_hot = F.one_hot(labels, n_way).to(features.dtype)
    return one_hot.T @ features / counts[0]


def cosine_logits(queries: torch.Tensor, prototypes: torch.Tensor, tau: float) -> torch.Tensor:
    q_norm = queries.norm(dim=-1, keepdim=True)
    p_norm = prototypes.norm(dim=-1, keepdim=True)
    if (q_norm == 0).any() or (p_norm == 0).any():
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return (queries / q_norm) @ (prototypes / p_norm).T / tau


def loss_cls(queries, relevant_prototypes, labels, tau: float) -> torch.Tensor:
    """Mean negative log-probability of the true class against relevant prototypes."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    return F.cross_entropy(cosine_logits(queries, relevant_prototypes, tau), labels)


def loss_adv(queries, irrelevant_prototypes, labels, tau: float) -> torch.Tensor:
    """Mean log-probability of the true class against irrelevant prototypes (minimised)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    return -F.cross_entropy(cosine_logits(queries, irrelevant_prototypes, tau), labels)


def loss_total(cls, adv, gamma: float):
    return cls + gamma * adv
