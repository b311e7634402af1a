"""Supervised pre-training on base classes and episodic fine-tuning."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ._seeding import derive_rng, seeded_init, torch_generator
from .data import Dataset, sample_episode
from .evaluation import evaluate
from .model import BiKopModel

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 12
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 128
    finetune_episodes: int = 800
    base_lr: float = 1e-4
    weight_decay: float = 1e-5
    lr_mult_bkp: float = 10.0
    lr_mult_sad: float = 50.0
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    val_every: int = 200
    val_episodes: int = 100
    early_stopping: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.pretrain_epochs < 0 or self.finetune_episodes < 0:
            raise ValueError("epoch/episode counts must be >= 0")
        if min(self.base_lr, self.pretrain_lr) <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be > 0 and weight_decay >= 0")
        if min(self.n_way, self.k_shot, self.n_query, self.pretrain_batch_size, self.val_every) < 1:
            raise ValueError("n_way, k_shot, n_query, pretrain_batch_size, val_every must be >= 1")


def _check_finite(loss: torch.Tensor, stage: str, step: int, extra: dict | None = None) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite {stage} loss {loss.item()} at step {step}; diagnostics: {extra or {}}"
        )


def pretrain(model: BiKopModel, dataset: Dataset, config: TrainConfig) -> dict:
    """Train the backbone with a throwaway linear classifier over the base classes."""
    base = dataset.splits["base"]
    if not base:
        raise ValueError("base split is empty")
    history = {"loss": [], "accuracy": []}
    if config.pretrain_epochs == 0:
        return history
    images, labels = dataset.split_images("base")
    remap = {c: i for i, c in enumerate(base)}
    targets = torch.as_tensor([remap[int(c)] for c in labels], dtype=torch.long)
    with seeded_init(config.seed, "init", 9):
        classifier = nn.Linear(model.config.backbone.dim, len(base)).to(model.dtype)
    params = list(model.backbone.parameters()) + list(classifier.parameters())
    opt = torch.optim.AdamW(params, lr=config.pretrain_lr, weight_decay=config.weight_decay)
    model.train()
    step = 0
    for epoch in range(config.pretrain_epochs):
        order = derive_rng(config.seed, "pretrain", epoch).permutation(len(images))
        total, correct = 0.0, 0
        for i in range(0, len(order), config.pretrain_batch_size):
            idx = order[i : i + config.pretrain_batch_size]
            logits = classifier(model.encode_query(images[idx]))
            loss = F.cross_entropy(logits, targets[idx])
            _check_finite(loss, "pretrain", step, {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(-1) == targets[idx]).sum())
            step += 1
        history["loss"].append(total / len(images))
        history["accuracy"].append(correct / len(images))
        log.info("pretrain epoch %d loss %.4f acc %.3f", epoch, history["loss"][-1], history["accuracy"][-1])
    return history


def make_optimizer(model: BiKopModel, config: TrainConfig, lr: float | None = None) -> torch.optim.AdamW:
    """AdamW with base / BKP (x lr_mult_bkp) / SAD (x lr_mult_sad) groups."""
    lr = config.base_lr if lr is None else lr
    mult = {"base": 1.0, "bkp": config.lr_mult_bkp, "sad": config.lr_mult_sad}
    groups = [
        {"params": [p for _, p in named], "lr": lr * mult[name], "name": name}
        for name, named in model.parameter_groups().items()
        if named
    ]
    return torch.optim.AdamW(groups, lr=lr, weight_decay=config.weight_decay)


def finetune_step(model: BiKopModel, optimizer, episode, generator=None, step: int = 0) -> dict:
    model.train()
    out = model.forward_episode(episode, mode="train", generator=generator)
    _check_finite(out.loss_total, "finetune", step,
                  {"loss_cls": out.loss_cls.item(), "loss_adv": out.loss_adv.item()})
    optimizer.zero_grad()
    out.loss_total.backward()
    optimizer.step()
    return {
        "loss_total": out.loss_total.item(),
        "loss_cls": out.loss_cls.item(),
        "loss_adv": out.loss_adv.item(),
    }


def finetune(model: BiKopModel, dataset: Dataset, config: TrainConfig) -> dict:
    """Episodic fine-tuning on base-split episodes.

    Episode ``i`` and its Gumbel noise come from the ``(seed, "train", i)`` and
    ``(seed, "gumbel", i)`` streams. With early stopping the parameters of the
    best validation checkpoint (val split, 1-shot) are restored at the end.
    """
    optimizer = make_optimizer(model, config)
    history = {"loss_total": [], "loss_cls": [], "loss_adv": [], "val": [], "best_episode": None}
    stream = hashlib.sha1()
    best_acc, best_state = -math.inf, None
    has_val = bool(dataset.splits.get("val")) and len(dataset.splits["val"]) >= config.n_way
    for i in range(config.finetune_episodes):
        ep = sample_episode(dataset, "base", config.n_way, config.k_shot, config.n_query,
                            derive_rng(config.seed, "train", i))
        stream.update(ep.digest().encode())
        losses = finetune_step(model, optimizer, ep, torch_generator(config.seed, "gumbel", i), i)
        for key, value in losses.items():
            history[key].append(value)
        if config.early_stopping and has_val and (i + 1) % config.val_every == 0:
            report = evaluate(model, dataset, "val", config.val_episodes, config.n_way, 1,
                              config.n_query, config.seed, tag="val")
            history["val"].append((i + 1, report.mean_accuracy))
            log.info("episode %d val acc %.2f", i + 1, report.mean_accuracy)
            if report.mean_accuracy > best_acc:
                best_acc, best_state = report.mean_accuracy, copy.deepcopy(model.state_dict())
                history["best_episode"] = i + 1
    if best_state is not None:
        model.load_state_dict(best_state)
    history["episode_hash"] = stream.hexdigest()
    history["episodes_seen"] = config.finetune_episodes
    return history
