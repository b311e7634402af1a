import json
import subprocess
import sys

import pytest

from bikop.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = [
    "--set", "data.images_per_class=20",
    "--set", "train.pretrain_epochs=1",
    "--set", "train.finetune_episodes=4",
    "--set", "train.val_every=2",
    "--set", "train.val_episodes=2",
    "--set", "train.n_query=5",
    "--set", "eval.n_episodes=4",
    "--set", "eval.n_query=5",
]


def run(root, *args, name="r"):
    return main([args[0], "--run-root", str(root), "--run", name, *TINY, *args[1:]])


def pipeline(root, name):
    for cmd in ("gen-data", "pretrain", "finetune", "eval"):
        assert run(root, cmd, name=name) == EXIT_OK, cmd
    lines = (root / name / "metrics" / "eval.jsonl").read_text().splitlines()
    return json.loads(lines[-1])


def test_pipeline_deterministic_and_layout(tmp_path):
    a = pipeline(tmp_path, "a")
    b = pipeline(tmp_path, "b")
    assert a == b
    d = tmp_path / "a"
    for rel in ("data/manifest.json", "data/images.bin", "checkpoints/pretrain.ckpt",
                "checkpoints/finetune.ckpt", "metrics/pretrain.jsonl", "metrics/finetune.jsonl",
                "gen-data.config.echo", "eval.config.echo"):
        assert (d / rel).exists(), rel
    echo = (d / "eval.config.echo").read_text()
    assert "# seed = 0" in echo and "eval.n_episodes = 4" in echo
    assert (tmp_path / "a" / "checkpoints" / "finetune.ckpt").read_bytes() == \
        (tmp_path / "b" / "checkpoints" / "finetune.ckpt").read_bytes()
    for cmd in ("mmc", "dump-attention"):
        assert run(tmp_path, cmd, name="a") == EXIT_OK
    assert json.loads((d / "metrics" / "mmc.json").read_text())["cv"] >= 0
    assert (d / "attention" / "episode-0.csv").exists()


def test_eval_without_checkpoint(tmp_path, capsys):
    assert run(tmp_path, "gen-data") == EXIT_OK
    assert run(tmp_path, "eval") == EXIT_RUNTIME
    assert "finetune.ckpt" in capsys.readouterr().err


def test_commands_without_data(tmp_path, capsys):
    assert run(tmp_path, "pretrain") == EXIT_RUNTIME
    assert "gen-data" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["eval", "--run-root", str(tmp_path), "--set", "lose.gamma=1"]) == EXIT_USAGE
    assert "lose.gamma" in capsys.readouterr().err
    assert main(["eval", "--run-root", str(tmp_path), "--config", str(tmp_path / "none.cfg")]) == EXIT_USAGE


def test_env_run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("BIKOP_RUN_ROOT", str(tmp_path / "env"))
    assert main(["gen-data", "--run", "x", *TINY]) == EXIT_OK
    assert (tmp_path / "env" / "x" / "data" / "manifest.json").exists()


def test_ablate_rejects_bad_grid(tmp_path):
    assert run(tmp_path, "gen-data") == EXIT_OK
    assert run(tmp_path, "ablate", "--grid", "nonsense") == EXIT_RUNTIME


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "bikop", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
    out = subprocess.run([sys.executable, "-m", "bikop", "eval", "--run-root", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == EXIT_RUNTIME
