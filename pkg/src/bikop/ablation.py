"""Ablation grids trained and evaluated with matched seeds."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .config import ConfigError, RunConfig
from .data import Dataset
from .evaluation import EvalReport, compute_mmc, evaluate, split_query_features
from .model import BiKopModel
from .training import finetune, pretrain

log = logging.getLogger(__name__)

_OFF = {"text.use_prompt": False, "bkp.fusion": "concat", "sad.enabled": False}

# component table: (name, prompt, vision->text, text->vision, filter)
COMPONENT_ROWS = (
    ("baseline", False, False, False, False),
    ("prompt", True, False, False, False),
    ("prompt+t2v", True, False, True, False),
    ("prompt+v2t", True, True, False, False),
    ("prompt+bi", True, True, True, False),
    ("bi+sad", False, True, True, True),
    ("full", True, True, True, True),
)

SWEEPS = {
    "w": ("text.prompt_length", (1, 2, 4, 8, 16)),
    "mu": ("bkp.mu", (0.0, 0.1, 0.2, 0.5, 1.0)),
    "gamma": ("loss.gamma", (0.0, 0.25, 0.5, 1.0)),
    "m": ("sad.n_samples", (8, 16, 32, 48, 64)),
    "depth": ("sad.depth", (1, 2, 3)),
}


@dataclass(frozen=True)
class AblationCell:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass
class AblationRow:
    cell: str
    seed: int
    report: EvalReport
    train_hash: str
    overrides: dict
    mmc_cv: float | None = None

    def as_record(self) -> dict:
        return {
            "cell": self.cell,
            "seed": self.seed,
            "mean_accuracy": self.report.mean_accuracy,
            "ci95": self.report.ci95,
            "n_episodes": self.report.n_episodes,
            "train_hash": self.train_hash,
            "eval_hash": self.report.episode_hash,
            "overrides": self.overrides,
            "mmc_cv": self.mmc_cv,
        }


def component_cell(name: str, prompt: bool, v2t: bool, t2v: bool, sad: bool) -> AblationCell:
    if not (v2t or t2v):
        ov = {"bkp.fusion": "concat"}
    else:
        ov = {"bkp.fusion": "cross_attention",
              "bkp.direction": "bi" if v2t and t2v else ("v2t" if v2t else "t2v")}
    ov["text.use_prompt"] = prompt
    ov["sad.enabled"] = sad
    return AblationCell(name, ov)


def component_grid() -> list[AblationCell]:
    return [component_cell(*row) for row in COMPONENT_ROWS]


def fusion_grid() -> list[AblationCell]:
    return [AblationCell(f"fusion={k}", {"bkp.fusion": k, "bkp.direction": "bi"})
            for k in ("dot", "add", "concat", "cross_attention")]


def sweep_grid(axis: str, values: Iterable | None = None) -> list[AblationCell]:
    if axis not in SWEEPS:
        raise KeyError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEPS)}")
    key, default = SWEEPS[axis]
    return [AblationCell(f"{axis}={v}", {key: v}) for v in (values if values is not None else default)]


def named_grid(names: Iterable[str]) -> list[AblationCell]:
    """Resolve grid names: ``components``, ``fusion`` or a sweep axis."""
    cells: list[AblationCell] = []
    for name in names:
        if name == "components":
            cells += component_grid()
        elif name == "fusion":
            cells += fusion_grid()
        else:
            cells += sweep_grid(name)
    return cells


def cell_config(base: RunConfig, cell: AblationCell) -> RunConfig:
    """Apply a cell's overrides and reject combinations that cannot be trained."""
    cfg = base.with_overrides(cell.overrides)
    if cfg.bkp.fusion == "cross_attention" and cfg.bkp.direction in ("v2t", "t2v") and not cfg.text.use_prompt:
        raise ConfigError("bkp.direction", f"cell {cell.name!r}: unidirectional permeation requires prompts")
    if cfg.sad.enabled and cfg.sad.resolved_samples(cfg.backbone.dim) < 1:
        raise ConfigError("sad.n_samples", f"cell {cell.name!r}: needs at least one sample")
    return cfg


def _pretrain_key(cfg: RunConfig) -> str:
    return json.dumps({"backbone": repr(cfg.backbone_config()), "seed": cfg.train.seed,
                       "epochs": cfg.train.pretrain_epochs, "lr": cfg.train.pretrain_lr,
                       "bs": cfg.train.pretrain_batch_size, "wd": cfg.train.weight_decay})


def run_ablation(cells: Iterable[AblationCell], dataset: Dataset, base: RunConfig | None = None,
                 seeds: Iterable[int] = (0,), on_row: Callable[[AblationRow], None] | None = None,
                 pretrained: dict | None = None, with_mmc: bool = False) -> list[AblationRow]:
    """Train and evaluate every cell for every seed.

    All cells share one pretrained backbone per seed, and cells with the same
    seed draw identical training and evaluation episode streams. ``pretrained``
    is an optional cache of backbone state dicts, filled in place. ``with_mmc``
    adds the channel-magnitude cv of the evaluation split's features to each row.
    """
    base = base or RunConfig()
    cells = list(cells)
    configs = {c.name: cell_config(base, c) for c in cells}  # reject bad cells before any work
    cache = {} if pretrained is None else pretrained
    rows = []
    for seed in seeds:
        for cell in cells:
            cfg = configs[cell.name].with_overrides({"train.seed": seed, "eval.seed": seed})
            model = BiKopModel(cfg.model_config(dataset.vocab_size))
            key = _pretrain_key(cfg)
            if key not in cache:
                pretrain(model, dataset, cfg.train)
                cache[key] = copy.deepcopy(model.backbone.state_dict())
            model.backbone.load_state_dict(cache[key])
            history = finetune(model, dataset, cfg.train)
            e = cfg.eval
            report = evaluate(model, dataset, e.split, e.n_episodes, e.n_way, e.k_shot, e.n_query, e.seed)
            cv = compute_mmc(split_query_features(model, dataset, e.split)).cv if with_mmc else None
            row = AblationRow(cell.name, seed, report, history["episode_hash"], dict(cell.overrides), cv)
            log.info("%s seed %d: %.2f +- %.2f", cell.name, seed, report.mean_accuracy, report.ci95)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def write_ablation_table(rows: list[AblationRow], path: str | Path) -> Path:
    """Tab-separated summary with one line per (cell, seed)."""
    path = Path(path)
    lines = ["cell\tseed\tmean_accuracy\tci95\tn_episodes"]
    lines += [f"{r.cell}\t{r.seed}\t{r.report.mean_accuracy:.2f}\t{r.report.ci95:.2f}\t{r.report.n_episodes}"
              for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path
