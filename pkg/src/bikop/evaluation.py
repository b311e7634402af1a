"""Episode-batch evaluation, channel-magnitude diagnostics and attention dumps."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, Episode, episode_stream


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 600
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    split: str = "novel"
    seed: int = 0


@dataclass
class EvalReport:
    mean_accuracy: float  # percent
    ci95: float  # percent
    n_episodes: int
    per_episode_acc: list[float]
    config: dict = field(default_factory=dict)
    episode_hash: str = ""

    def as_record(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "n_episodes": self.n_episodes,
            "per_episode_acc": self.per_episode_acc,
            "config": self.config,
            "episode_hash": self.episode_hash,
        }


@dataclass
class MmcReport:
    mmc: np.ndarray
    cv: float


def summarize_accuracies(per_episode_acc, config: dict | None = None, episode_hash: str = "") -> EvalReport:
    """Mean and 95% interval (1.96 * sample std / sqrt(n)), both in percent."""
    acc = np.asarray(per_episode_acc, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no episodes to summarise")
    ci = 1.96 * acc.std(ddof=1) / math.sqrt(acc.size) if acc.size > 1 else float("nan")
    return EvalReport(
        mean_accuracy=100.0 * float(acc.mean()),
        ci95=100.0 * float(ci),
        n_episodes=int(acc.size),
        per_episode_acc=[float(a) for a in acc],
        config=dict(config or {}),
        episode_hash=episode_hash,
    )


def episode_accuracy(logits: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return float((logits.argmax(dim=-1) == labels).double().mean())


@torch.no_grad()
def evaluate(model, dataset: Dataset, split: str = "novel", n_episodes: int = 600,
             n_way: int = 5, k_shot: int = 1, n_query: int = 15, seed: int = 0,
             tag: str = "eval") -> EvalReport:
    """Accuracy over ``n_episodes`` episodes drawn from ``(seed, tag, i)`` streams.

    ``model`` only needs ``forward_episode(episode, mode="eval")`` returning an
    object with ``.logits``.
    """
    if not dataset.splits.get(split):
        raise ValueError(f"split {split!r} is empty or missing")
    accs = []
    h = hashlib.sha1()
    for ep in episode_stream(dataset, split, n_way, k_shot, n_query, seed, tag, n_episodes):
        out = model.forward_episode(ep, mode="eval")
        accs.append(episode_accuracy(out.logits, ep.query_labels))
        h.update(ep.digest().encode())
    cfg = {"split": split, "n_episodes": n_episodes, "n_way": n_way, "k_shot": k_shot,
           "n_query": n_query, "seed": seed, "tag": tag}
    return summarize_accuracies(accs, cfg, h.hexdigest())


def compute_mmc(features) -> MmcReport:
    """Per-channel mean absolute value and its coefficient of variation."""
    f = np.abs(np.asarray(features, dtype=np.float64))
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError("features must be a non-empty (n, C) array")
    mmc = f.mean(axis=0)
    mean = mmc.mean()
    if mean == 0:
        raise ValueError("all-zero features: coefficient of variation undefined")
    return MmcReport(mmc=mmc, cv=float(mmc.std() / mean))


@torch.no_grad()
def split_query_features(model, dataset: Dataset, split: str = "novel", batch_size: int = 256) -> np.ndarray:
    images, _ = dataset.split_images(split)
    feats = [model.encode_query(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(feats).double().numpy()


@torch.no_grad()
def dump_attention(model, episode: Episode) -> list[dict]:
    """Vision-to-text attention of each support image, reshaped to the patch grid."""
    cfg = model.config.bkp
    if cfg.fusion != "cross_attention" or cfg.direction not in ("bi", "v2t"):
        raise ValueError("attention dump requires vision-to-text cross-attention permeation")
    labels = torch.as_tensor(episode.support_labels, dtype=torch.long)
    text = model.prompt_embeddings(episode)[labels]
    z = model.backbone.encode_lower(model.backbone.patchify(model._images(episode.support_images)))
    _, a_t = model.bkp.vision_to_text(text, z)
    grid = model.config.backbone.grid
    records = []
    for i in range(len(labels)):
        records.append({
            "support_index": i,
            "label": int(labels[i]),
            "class_id": int(episode.class_ids[labels[i]]),
            "image_id": int(episode.support_ids[i]),
            "attention": a_t[i, 0].double().numpy().reshape(grid),
        })
    return records


def write_attention_csv(records: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["support_index", "label", "class_id", "image_id", "row", "col", "attention"])
        for r in records:
            for (row, col), a in np.ndenumerate(r["attention"]):
                w.writerow([r["support_index"], r["label"], r["class_id"], r["image_id"], row, col, repr(float(a))])
    return path


def write_mmc_csv(report: MmcReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "mmc"])
        for i, v in enumerate(report.mmc):
            w.writerow([i, repr(float(v))])
    return path
