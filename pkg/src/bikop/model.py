"""The full few-shot learner and its per-episode forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, images_to_tensor
from .bkp import BKPConfig, KnowledgePermeation, fuse_variant
from .data import Episode
from .head import LossConfig, compute_prototypes, cosine_logits, loss_adv, loss_cls, loss_total
from .sad import FilterNet, SADConfig, disentangle
from .text import TextBranch, TextConfig


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    text: TextConfig = field(default_factory=TextConfig)
    bkp: BKPConfig = field(default_factory=BKPConfig)
    sad: SADConfig = field(default_factory=SADConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    vocab_size: int = 14
    n_slots: int = 5
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        self.bkp.validate()
        self.sad.validate()
        self.loss.validate()
        if self.n_slots < 1 or self.vocab_size < 1:
            raise ValueError("n_slots and vocab_size must be >= 1")


@dataclass
class EpisodeOutput:
    prototypes: torch.Tensor
    relevant_prototypes: torch.Tensor
    irrelevant_prototypes: torch.Tensor | None
    filters: torch.Tensor | None
    support_features: torch.Tensor
    query_features: torch.Tensor
    logits: torch.Tensor
    loss_cls: torch.Tensor | None = None
    loss_adv: torch.Tensor | None = None
    loss_total: torch.Tensor | None = None
    text_attention: torch.Tensor | None = None  # A_T, (NK, 1, M)
    visual_attention: torch.Tensor | None = None  # A_Z, (NK, M, 1)


class BiKopModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        dim = config.backbone.dim
        self.backbone = Backbone(config.backbone, seed=config.seed)
        self.text = TextBranch(config.text, config.vocab_size, config.n_slots, dim, seed=config.seed)
        self.bkp = KnowledgePermeation(
            dim, config.bkp.mu, config.bkp.hidden_ratio, config.bkp.text_softmax_axis, seed=config.seed
        )
        self.filter_net = FilterNet(
            dim, config.sad.resolved_samples(dim), config.sad.temperature,
            config.sad.depth, config.sad.hidden_ratio, seed=config.seed,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.backbone.patch_embed.weight.dtype

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Trainable parameters by learning-rate group; the frozen text encoder is never listed."""
        groups = {"base": [], "bkp": [], "sad": []}
        for name, p in self.named_parameters():
            if name.startswith("text.encoder."):
                continue
            if name.startswith("bkp."):
                groups["bkp"].append((name, p))
            elif name.startswith("filter_net."):
                groups["sad"].append((name, p))
            else:
                groups["base"].append((name, p))
        return groups

    def frozen_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("text.encoder.")]

    def _images(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            return images.to(self.dtype)
        return images_to_tensor(images, self.dtype)

    def encode_query(self, images) -> torch.Tensor:
        return self.backbone.encode_query(self._images(images))

    def prompt_embeddings(self, episode: Episode) -> torch.Tensor:
        """One prompt embedding per episode label, ``(N, dim)``."""
        slots = [episode.slot_assignment[c] for c in range(episode.n_way)]
        return self.text(slots, episode.name_tokens)

    def encode_support(self, images, text: torch.Tensor):
        """Joint support features ``(B, dim)`` plus both permeation maps (or None)."""
        z = self.backbone.encode_lower(self.backbone.patchify(self._images(images)))
        cfg = self.config.bkp
        a_z = a_t = None
        if cfg.fusion == "cross_attention":
            z_hat, t_hat, a_z, a_t = self.bkp.permeate(z, text, cfg.direction)
        else:
            z_hat, t_hat = fuse_variant(z, text, cfg.fusion)
        return self.backbone.encode_joint(z_hat, t_hat), a_z, a_t

    def forward_episode(self, episode: Episode, mode: str = "eval",
                        generator: torch.Generator | None = None,
                        gumbel_noise: torch.Tensor | None = None) -> EpisodeOutput:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        labels = torch.as_tensor(episode.support_labels, dtype=torch.long)
        text = self.prompt_embeddings(episode)[labels]
        support, a_z, a_t = self.encode_support(episode.support_images, text)
        prototypes = compute_prototypes(support, labels, episode.n_way)

        filters = irrelevant = None
        relevant = prototypes
        if cfg.sad.enabled:
            if mode == "train":
                filters = self.filter_net.sample_filter(
                    prototypes, generator, hard=cfg.sad.mode == "hard", noise=gumbel_noise
                )
            else:
                filters = self.filter_net.eval_filter(prototypes)
            relevant, irrelevant = disentangle(prototypes, filters)

        queries = self.encode_query(episode.query_images)
        scoring = relevant if cfg.sad.eval_prototype == "relevant" or mode == "train" else prototypes
        logits = cosine_logits(queries, scoring, cfg.loss.tau)
        out = EpisodeOutput(
            prototypes=prototypes, relevant_prototypes=relevant, irrelevant_prototypes=irrelevant,
            filters=filters, support_features=support, query_features=queries, logits=logits,
            text_attention=a_t, visual_attention=a_z,
        )
        if mode == "train":
            q_labels = torch.as_tensor(episode.query_labels, dtype=torch.long)
            out.loss_cls = loss_cls(queries, relevant, q_labels, cfg.loss.tau)
            if cfg.sad.enabled:
                out.loss_adv = loss_adv(queries, irrelevant, q_labels, cfg.loss.tau)
            else:
                out.loss_adv = torch.zeros((), dtype=out.loss_cls.dtype)
            out.loss_total = loss_total(out.loss_cls, out.loss_adv, cfg.loss.gamma)
        return out

    @torch.no_grad()
    def predict_episode(self, episode: Episode) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            return self.forward_episode(episode, mode="eval").logits
        finally:
            self.train(was_training)
