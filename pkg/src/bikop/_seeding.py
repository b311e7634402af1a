"""Seed derivation.

Every random stream in the package is derived from ``(seed, tag, index)``
through :class:`numpy.random.SeedSequence`, so streams with different tags
never overlap and episode ``i`` can be regenerated without replaying
episodes ``0..i-1``.
"""
from __future__ import annotations

import contextlib

import numpy as np
import torch

TAGS = {
    "render": 11,
    "split": 12,
    "pretrain": 13,
    "train": 14,
    "val": 15,
    "eval": 16,
    "init": 17,
    "gumbel": 18,
    "text": 19,
}


def _entropy(seed: int, tag: str, index: int) -> list[int]:
    if tag not in TAGS:
        raise KeyError(f"unknown seed tag {tag!r}")
    return [int(seed), TAGS[tag], int(index)]


def derive_rng(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, tag, index)))


def derive_int(seed: int, tag: str, index: int = 0) -> int:
    state = np.random.SeedSequence(_entropy(seed, tag, index)).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def torch_generator(seed: int, tag: str, index: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(derive_int(seed, tag, index))


@contextlib.contextmanager
def seeded_init(seed: int, tag: str, index: int = 0):
    """Run module construction under a private torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_int(seed, tag, index))
        yield
