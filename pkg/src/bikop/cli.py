"""Command-line entry point.

Every command works inside one run directory, ``<run-root>/<run>``, where the
run root comes from ``--run-root``, else ``$BIKOP_RUN_ROOT``, else ``./runs``::

    <run>/
      <command>.config.echo   merged config used by that command
      data/                   manifest.json + images.bin        (gen-data)
      checkpoints/            pretrain.ckpt, finetune.ckpt      (pretrain, finetune)
      metrics/                pretrain.jsonl, finetune.jsonl, eval.jsonl, mmc.csv, mmc.json
      ablation/               rows.jsonl, table.tsv              (ablate)
      attention/              episode-<i>.csv                    (dump-attention)

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ._seeding import derive_rng
from .ablation import named_grid, run_ablation, write_ablation_table
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .data import generate_dataset, load_dataset, sample_episode, save_dataset
from .evaluation import compute_mmc, dump_attention, evaluate, split_query_features, write_attention_csv, write_mmc_csv
from .model import BiKopModel
from .training import finetune, pretrain

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ENV_RUN_ROOT = "BIKOP_RUN_ROOT"

log = logging.getLogger("bikop")


class UsageError(Exception):
    pass


class MissingArtifactError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class Run:
    def __init__(self, root: Path, name: str, cfg: RunConfig):
        self.dir = root / name
        self.cfg = cfg

    @property
    def data_dir(self) -> Path:
        return self.dir / "data"

    def path(self, *parts: str) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def echo(self, command: str) -> None:
        self.path(f"{command}.config.echo").write_text(
            f"# command = {command}\n# seed = {self.cfg.train.seed}\n" + self.cfg.to_text()
        )

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing artifact {path} (run `{hint}` first)")
        return path

    def dataset(self):
        self.require(self.data_dir / "manifest.json", "gen-data")
        return load_dataset(self.data_dir)

    def checkpoint(self, stage: str):
        return load_checkpoint(self.require(self.dir / "checkpoints" / f"{stage}.ckpt", stage)).model

    def append_jsonl(self, name: str, record: dict) -> None:
        with self.path("metrics", name).open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _cmd_gen_data(run: Run, args) -> None:
    ds = generate_dataset(run.cfg.data)
    save_dataset(ds, run.data_dir)
    print(f"wrote {len(ds.images)} images for {len(ds.classes)} classes to {run.data_dir}")


def _cmd_pretrain(run: Run, args) -> None:
    ds = run.dataset()
    model = BiKopModel(run.cfg.model_config(ds.vocab_size))
    history = pretrain(model, ds, run.cfg.train)
    save_checkpoint(model, run.path("checkpoints", "pretrain.ckpt"), "pretrain",
                    {"run": run.cfg.as_dict()}, {"seed": run.cfg.train.seed, "tag": "pretrain"})
    for epoch, (loss, acc) in enumerate(zip(history["loss"], history["accuracy"])):
        run.append_jsonl("pretrain.jsonl", {"epoch": epoch, "loss": loss, "accuracy": acc})
    if history["accuracy"]:
        print(f"pretrain accuracy {100 * history['accuracy'][-1]:.2f}%")


def _cmd_finetune(run: Run, args) -> None:
    ds = run.dataset()
    model = BiKopModel(run.cfg.model_config(ds.vocab_size))
    if not args.fresh:
        model.backbone.load_state_dict(run.checkpoint("pretrain").backbone.state_dict())
    history = finetune(model, ds, run.cfg.train)
    save_checkpoint(model, run.path("checkpoints", "finetune.ckpt"), "finetune",
                    {"run": run.cfg.as_dict()}, {"seed": run.cfg.train.seed, "tag": "train"})
    run.append_jsonl("finetune.jsonl", {
        "episodes": history["episodes_seen"], "best_episode": history["best_episode"],
        "val": history["val"], "episode_hash": history["episode_hash"],
        "final_loss_total": history["loss_total"][-1] if history["loss_total"] else None,
    })
    print(f"finetuned {history['episodes_seen']} episodes (best at {history['best_episode']})")


def _cmd_eval(run: Run, args) -> None:
    ds = run.dataset()
    model = run.checkpoint(args.stage)
    e = run.cfg.eval
    report = evaluate(model, ds, e.split, e.n_episodes, e.n_way, e.k_shot, e.n_query, e.seed)
    record = report.as_record()
    record["checkpoint"] = args.stage
    run.append_jsonl("eval.jsonl", record)
    print(f"{e.split} {e.n_way}-way {e.k_shot}-shot: {report.mean_accuracy:.2f} +- {report.ci95:.2f}")


def _cmd_ablate(run: Run, args) -> None:
    ds = run.dataset()
    cells = named_grid(args.grid.split(","))
    seeds = [int(s) for s in args.seeds.split(",")]
    rows_path = run.path("ablation", "rows.jsonl")

    def on_row(row):
        with rows_path.open("a") as fh:
            fh.write(json.dumps(row.as_record(), sort_keys=True) + "\n")

    rows = run_ablation(cells, ds, run.cfg, seeds, on_row=on_row, with_mmc=args.mmc)
    write_ablation_table(rows, run.path("ablation", "table.tsv"))
    for r in rows:
        print(f"{r.cell:>24s} seed {r.seed}: {r.report.mean_accuracy:.2f} +- {r.report.ci95:.2f}")


def _cmd_mmc(run: Run, args) -> None:
    ds = run.dataset()
    model = run.checkpoint(args.stage)
    report = compute_mmc(split_query_features(model, ds, run.cfg.eval.split))
    write_mmc_csv(report, run.path("metrics", "mmc.csv"))
    run.path("metrics", "mmc.json").write_text(json.dumps(
        {"cv": report.cv, "split": run.cfg.eval.split, "checkpoint": args.stage}, sort_keys=True) + "\n")
    print(f"mmc cv {report.cv:.4f}")


def _cmd_dump_attention(run: Run, args) -> None:
    ds = run.dataset()
    model = run.checkpoint(args.stage)
    e = run.cfg.eval
    ep = sample_episode(ds, e.split, e.n_way, e.k_shot, e.n_query, derive_rng(e.seed, "eval", args.episode))
    path = write_attention_csv(dump_attention(model, ep), run.path("attention", f"episode-{args.episode}.csv"))
    print(f"wrote {path}")


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "mmc": _cmd_mmc,
    "dump-attention": _cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. loss.gamma=0.0 (repeatable)")
    common.add_argument("--run", default="default", help="run directory name")
    common.add_argument("--run-root", type=Path, help=f"run root (default ${ENV_RUN_ROOT} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="bikop", description="Few-shot learner with text/vision permeation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="supervised pre-training on base classes")
    p = sub.add_parser("finetune", parents=[common], help="episodic fine-tuning")
    p.add_argument("--fresh", action="store_true", help="start from initialization instead of pretrain.ckpt")
    for name in ("eval", "mmc", "dump-attention"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--stage", default="finetune", choices=("pretrain", "finetune"),
                       help="checkpoint to load")
        if name == "dump-attention":
            p.add_argument("--episode", type=int, default=0, help="evaluation episode index")
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate an ablation grid")
    p.add_argument("--grid", default="components",
                   help="comma list of: components, fusion, w, mu, gamma, m, depth")
    p.add_argument("--seeds", default="0", help="comma list of seeds")
    p.add_argument("--mmc", action="store_true", help="also record the channel-magnitude cv per row")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = parse_config(args.config, args.overrides)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    root = args.run_root or Path(os.environ.get(ENV_RUN_ROOT, "runs"))
    run = Run(root, args.run, cfg)
    try:
        run.dir.mkdir(parents=True, exist_ok=True)
        run.echo(args.command)
        COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifactError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
