import csv
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from bikop.bkp import BKPConfig
from bikop.evaluation import (compute_mmc, dump_attention, evaluate, summarize_accuracies,
                              write_attention_csv, write_mmc_csv)
from bikop.model import BiKopModel, ModelConfig
from bikop.data import sample_episode
from bikop._seeding import derive_rng


class Oracle:
    """Scores every query correctly."""

    def forward_episode(self, ep, mode="eval"):
        return SimpleNamespace(logits=torch.nn.functional.one_hot(torch.as_tensor(ep.query_labels), ep.n_way).float())


class Random:
    def __init__(self):
        self.g = torch.Generator().manual_seed(0)

    def forward_episode(self, ep, mode="eval"):
        return SimpleNamespace(logits=torch.rand(len(ep.query_labels), ep.n_way, generator=self.g))


def test_ci_hand_example():
    r = summarize_accuracies([0.5, 0.7])
    assert round(r.mean_accuracy, 2) == 60.00
    assert round(r.ci95, 2) == 19.60
    assert r.ci95 == pytest.approx(1.96 * 0.1414213562373095 / np.sqrt(2) * 100, abs=1e-9)


def test_ci_formula_random():
    acc = np.random.default_rng(0).random(37)
    r = summarize_accuracies(acc)
    assert r.ci95 == pytest.approx(100 * 1.96 * acc.std(ddof=1) / np.sqrt(37))
    assert 0 <= r.mean_accuracy <= 100
    with pytest.raises(ValueError):
        summarize_accuracies([])


def test_perfect_stub(small_dataset):
    r = evaluate(Oracle(), small_dataset, n_episodes=20, n_query=5)
    assert r.mean_accuracy == 100.0 and r.ci95 == 0.0
    assert r.n_episodes == 20 and len(r.per_episode_acc) == 20
    rec = r.as_record()
    assert set(rec) >= {"mean_accuracy", "ci95", "n_episodes", "per_episode_acc", "config", "episode_hash"}


def test_random_stub_near_chance(small_dataset):
    r = evaluate(Random(), small_dataset, n_episodes=500, n_query=15)
    assert abs(r.mean_accuracy - 20.0) <= 3.0


def test_empty_split(small_dataset):
    with pytest.raises(ValueError):
        evaluate(Oracle(), small_dataset, split="test")


def test_evaluation_is_side_effect_free(small_dataset):
    model = BiKopModel(ModelConfig(vocab_size=14))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    a = evaluate(model, small_dataset, n_episodes=3, n_query=4)
    b = evaluate(model, small_dataset, n_episodes=3, n_query=4)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert a.per_episode_acc == b.per_episode_acc and a.episode_hash == b.episode_hash


def test_eval_stream_differs_from_val_stream(small_dataset):
    a = evaluate(Oracle(), small_dataset, "base", 3, 5, 1, 4, 0, tag="eval")
    b = evaluate(Oracle(), small_dataset, "base", 3, 5, 1, 4, 0, tag="val")
    assert a.episode_hash != b.episode_hash


def test_mmc_examples():
    assert compute_mmc(np.full((4, 3), 2.5)).cv == 0.0
    r = compute_mmc(np.eye(6))
    assert np.allclose(r.mmc, 1 / 6) and r.cv == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        compute_mmc(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        compute_mmc(np.zeros((0, 4)))


def test_mmc_matches_recomputation():
    x = np.random.default_rng(1).normal(size=(50, 7))
    r = compute_mmc(x)
    mmc = [sum(abs(x[i, c]) for i in range(50)) / 50 for c in range(7)]
    mean = sum(mmc) / 7
    std = (sum((m - mean) ** 2 for m in mmc) / 7) ** 0.5
    assert np.abs(r.mmc - mmc).max() < 1e-10 and abs(r.cv - std / mean) < 1e-10
    assert (r.mmc >= 0).all() and r.cv >= 0


def test_mmc_csv(tmp_path):
    r = compute_mmc(np.random.default_rng(1).normal(size=(5, 3)))
    rows = list(csv.reader(write_mmc_csv(r, tmp_path / "m.csv").open()))
    assert rows[0] == ["channel", "mmc"] and len(rows) == 4
    assert float(rows[2][1]) == r.mmc[1]


def test_attention_dump(small_dataset, tmp_path):
    model = BiKopModel(ModelConfig(vocab_size=14, seed=1))
    ep = sample_episode(small_dataset, "novel", 5, 1, 2, derive_rng(0, "eval", 0))
    recs = dump_attention(model, ep)
    assert len(recs) == 5
    for r in recs:
        assert r["attention"].shape == (4, 4)
        assert abs(r["attention"].sum() - 1) < 1e-6
    again = dump_attention(model, ep)
    assert all(np.array_equal(a["attention"], b["attention"]) for a, b in zip(recs, again))
    rows = list(csv.reader(write_attention_csv(recs, tmp_path / "a.csv").open()))
    assert rows[0] == ["support_index", "label", "class_id", "image_id", "row", "col", "attention"]
    assert len(rows) == 1 + 5 * 16


@pytest.mark.parametrize("bkp", [BKPConfig(fusion="concat"), BKPConfig(direction="t2v"), BKPConfig(fusion="add")])
def test_attention_dump_requires_text_attention(small_dataset, bkp):
    model = BiKopModel(ModelConfig(vocab_size=14, bkp=bkp))
    ep = sample_episode(small_dataset, "novel", 5, 1, 2, derive_rng(0, "eval", 0))
    with pytest.raises(ValueError):
        dump_attention(model, ep)
