"""Meta-class-specific prompts and the frozen text encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from ._seeding import seeded_init, torch_generator


@dataclass(frozen=True)
class TextConfig:
    token_dim: int = 32
    prompt_length: int = 8
    use_prompt: bool = True
    prefix_init_std: float = 0.02
    encoder_seed: int = 0

    @property
    def effective_length(self) -> int:
        return self.prompt_length if self.use_prompt else 0


class FrozenTextEncoder(nn.Module):
    """Seeded random token table followed by two frozen ``tanh(linear)`` layers.

    The mixer acts on the mean token embedding, so related names (sharing a
    token) map to related vectors. Nothing here is ever trained.
    """

    def __init__(self, vocab_size: int, token_dim: int = 32, seed: int = 0):
        super().__init__()
        g = torch_generator(seed, "text")
        self.token_embedding = nn.Parameter(
            torch.randn(vocab_size, token_dim, generator=g), requires_grad=False
        )
        scale = token_dim**-0.5
        self.mixer_weights = nn.ParameterList(
            [
                nn.Parameter(torch.randn(token_dim, token_dim, generator=g) * scale, requires_grad=False)
                for _ in range(2)
            ]
        )
        self.mixer_biases = nn.ParameterList(
            [nn.Parameter(torch.zeros(token_dim), requires_grad=False) for _ in range(2)]
        )

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    def embed_tokens(self, tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise IndexError(f"token id out of range for vocab of {self.vocab_size}")
        return self.token_embedding[tokens]

    def forward(self, sequence: torch.Tensor) -> torch.Tensor:
        h = sequence.mean(dim=-2)
        for w, b in zip(self.mixer_weights, self.mixer_biases):
            h = torch.tanh(h @ w.T + b)
        return h


class PromptBank(nn.Module):
    """``n_slots`` groups of ``length`` learnable prefix token embeddings."""

    def __init__(self, n_slots: int, length: int, token_dim: int, init_std: float = 0.02):
        super().__init__()
        self.prefix_tokens = nn.Parameter(torch.randn(n_slots, length, token_dim) * init_std)

    @property
    def n_slots(self) -> int:
        return self.prefix_tokens.shape[0]

    @property
    def length(self) -> int:
        return self.prefix_tokens.shape[1]


class TextBranch(nn.Module):
    """Prompt construction, frozen encoding and the trainable projection to the visual width."""

    def __init__(self, config: TextConfig, vocab_size: int, n_slots: int, dim: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.encoder = FrozenTextEncoder(vocab_size, config.token_dim, config.encoder_seed)
        with seeded_init(seed, "init", 1):
            self.prompts = PromptBank(
                n_slots, config.effective_length, config.token_dim, config.prefix_init_std
            )
        with seeded_init(seed, "init", 2):
            self.projection = nn.Linear(config.token_dim, dim, bias=False)

    def build_prompt(self, slot: int, name_tokens: Sequence[int]) -> torch.Tensor:
        """Prefix tokens of ``slot`` followed by the name token embeddings, ``(w + len, token_dim)``."""
        if not 0 <= slot < self.prompts.n_slots:
            raise IndexError(f"slot {slot} out of range [0, {self.prompts.n_slots})")
        if len(name_tokens) == 0:
            raise ValueError("name_tokens must be nonempty")
        names = self.encoder.embed_tokens(name_tokens).to(self.prompts.prefix_tokens.dtype)
        return torch.cat([self.prompts.prefix_tokens[slot], names], dim=0)

    def encode_prompt(self, prompt: torch.Tensor) -> torch.Tensor:
        return self.projection(self.encoder(prompt))

    def forward(self, slots: Sequence[int], names: Sequence[Sequence[int]]) -> torch.Tensor:
        """Prompt embeddings ``(len(slots), dim)``."""
        prompts = [self.build_prompt(s, n) for s, n in zip(slots, names)]
        return torch.stack([self.encode_prompt(p) for p in prompts])

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("encoder.")]
