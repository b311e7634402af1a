import dataclasses
import math

import numpy as np
import pytest
import torch

from bikop.bkp import BKPConfig
from bikop.head import (LossConfig, compute_prototypes, cosine_logits, loss_adv, loss_cls,
                        loss_total)
from bikop.sad import SADConfig, sample_gumbel

import oracles
from conftest import finite_difference_check, micro_episode, micro_model


# ---- prototypes and losses ----

def test_prototype_examples():
    f = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert torch.equal(compute_prototypes(f, [0, 0], 1), torch.tensor([[0.5, 0.5]]))
    assert torch.equal(compute_prototypes(f, [0, 1], 2), f)


def test_prototypes_order_invariant():
    f = torch.randn(6, 4, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    perm = torch.randperm(6)
    assert torch.allclose(compute_prototypes(f, labels, 3), compute_prototypes(f[perm], labels[perm], 3))


def test_uneven_shots_rejected():
    with pytest.raises(ValueError):
        compute_prototypes(torch.randn(3, 4), [0, 0, 1], 2)
    with pytest.raises(ValueError):
        compute_prototypes(torch.randn(2, 4), [0, 0], 2)


def test_cosine_logit_examples():
    q = torch.tensor([[1.0, 2.0]])
    p = torch.tensor([[2.0, 4.0], [-2.0, 1.0]])
    out = cosine_logits(q, p, 0.2)
    assert torch.allclose(out, torch.tensor([[5.0, 0.0]]), atol=1e-6)
    assert torch.allclose(cosine_logits(q * 7.5, p, 0.2), out)
    with pytest.raises(ValueError):
        cosine_logits(torch.zeros(1, 2), p, 0.2)
    with pytest.raises(ValueError):
        cosine_logits(q, torch.zeros(2, 2), 0.2)


def test_loss_closed_forms():
    q = torch.tensor([[1.0, 0.0]])
    p = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    assert abs(loss_cls(q, p, [0], 1.0).item() - math.log(1 + math.exp(-2))) < 1e-6
    assert abs(loss_cls(q, p, [0], 1.0).item() - 0.126928) < 1e-6
    eq = torch.tensor([[1.0, 1.0, 1.0, 1.0, 1.0]])
    protos = torch.eye(5)
    assert abs(loss_cls(eq, protos, [2], 0.2).item() - math.log(5)) < 1e-6
    assert abs(loss_adv(eq, protos, [2], 0.2).item() + math.log(5)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_losses_match_oracle(seed):
    rng = np.random.default_rng(seed)
    q, p = rng.normal(size=(15, 8)), rng.normal(size=(5, 8))
    y = rng.integers(0, 5, size=15)
    tq, tp = torch.from_numpy(q), torch.from_numpy(p)
    assert abs(loss_cls(tq, tp, y, 0.2).item() - oracles.cls_loss(q, p, y, 0.2)) < 1e-8
    assert abs(loss_adv(tq, tp, y, 0.2).item() - oracles.adv_loss(q, p, y, 0.2)) < 1e-8
    assert loss_adv(tq, tp, y, 0.2).item() == -loss_cls(tq, tp, y, 0.2).item()


def test_loss_total_linear_in_gamma():
    assert loss_total(1.0, -0.4, 0.5) == pytest.approx(0.8)
    assert loss_total(1.3, -0.4, 0.0) == 1.3
    vals = [loss_total(1.0, -0.4, g) for g in (0.0, 0.5, 1.0)]
    assert vals[1] - vals[0] == pytest.approx(vals[2] - vals[1])


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0).validate()
    with pytest.raises(ValueError):
        LossConfig(gamma=-1).validate()


def test_loss_cls_bounded():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q, p = torch.from_numpy(rng.normal(size=(4, 6))), torch.from_numpy(rng.normal(size=(3, 6)))
        y = rng.integers(0, 3, size=4)
        v = loss_cls(q, p, y, 0.2).item()
        assert 0 <= v <= math.log(3) + 2 / 0.2


# ---- full episode ----

def test_eval_logits_match_oracle():
    model = micro_model(sad=SADConfig(n_samples=4, mode="hard"))
    model.eval()
    ep = micro_episode(1)
    logits = model.predict_episode(ep).numpy()
    ref = oracles.episode_logits(oracles.state_dict_numpy(model), model.config, ep)
    assert logits.shape == (4, 2)
    assert np.abs(logits - ref).max() < 1e-5


def test_eval_deterministic():
    model = micro_model()
    ep = micro_episode(2)
    assert torch.equal(model.predict_episode(ep), model.predict_episode(ep))


def test_train_outputs_and_total_decomposition():
    model = micro_model(sad=SADConfig(n_samples=4, mode="hard"))
    ep = micro_episode(3, n_way=2, k_shot=2, n_query=3)
    out = model.forward_episode(ep, "train", torch.Generator().manual_seed(0))
    assert out.logits.shape == (6, 2)
    assert torch.allclose(out.relevant_prototypes + out.irrelevant_prototypes, out.prototypes, atol=1e-6)
    assert abs(out.loss_total.item() - (out.loss_cls.item() + 0.5 * out.loss_adv.item())) < 1e-6
    assert torch.equal(out.visual_attention, torch.ones_like(out.visual_attention))
    assert torch.allclose(out.text_attention.sum(-1), torch.ones(4, 1, dtype=torch.float64), atol=1e-6)


def test_eval_mode_has_no_losses():
    out = micro_model().forward_episode(micro_episode(0), "eval")
    assert out.loss_total is None
    with pytest.raises(ValueError):
        micro_model().forward_episode(micro_episode(0), "test")


def test_relabeling_permutes_logit_columns():
    model = micro_model(sad=SADConfig(n_samples=4, mode="hard"))
    ep = micro_episode(4, n_way=2, k_shot=1, n_query=2)
    # swap the two classes: support/query labels, names and slots move together
    swapped = dataclasses.replace(
        ep,
        support_labels=1 - ep.support_labels,
        query_labels=1 - ep.query_labels,
        class_ids=ep.class_ids[::-1],
        name_tokens=ep.name_tokens[::-1],
        slot_assignment=ep.slot_assignment[::-1],
    )
    a = model.predict_episode(ep)
    b = model.predict_episode(swapped)
    assert torch.allclose(a, b[:, [1, 0]], atol=1e-12)
    noise = sample_gumbel((2, 4, 8), torch.Generator().manual_seed(0), torch.float64)
    la = model.forward_episode(ep, "train", gumbel_noise=noise).loss_cls
    lb = model.forward_episode(swapped, "train", gumbel_noise=noise[[1, 0]]).loss_cls
    assert abs(la.item() - lb.item()) < 1e-12


def test_query_path_ignores_prompts():
    model = micro_model()
    ep = micro_episode(0)
    before = model.encode_query(ep.query_images)
    with torch.no_grad():
        model.text.prompts.prefix_tokens.add_(1.0)
    assert torch.equal(before, model.encode_query(ep.query_images))


def test_sad_disabled_and_full_prototype_modes():
    off = micro_model(sad=SADConfig(enabled=False))
    out = off.forward_episode(micro_episode(0), "train")
    assert out.filters is None and out.loss_adv.item() == 0.0
    full = micro_model(sad=SADConfig(n_samples=2, eval_prototype="full"))
    ep = micro_episode(0)
    out = full.forward_episode(ep, "eval")
    from bikop.head import cosine_logits as cl
    assert torch.allclose(out.logits, cl(out.query_features, out.prototypes, 0.2))


@pytest.mark.parametrize("fusion", ["dot", "add", "concat"])
def test_fusion_variants_run(fusion):
    model = micro_model(bkp=BKPConfig(fusion=fusion))
    out = model.forward_episode(micro_episode(0), "train", torch.Generator().manual_seed(0))
    assert torch.isfinite(out.loss_total) and out.text_attention is None


def test_parameter_groups_exclude_frozen_encoder():
    model = micro_model()
    groups = model.parameter_groups()
    listed = {n for g in groups.values() for n, _ in g}
    frozen = {n for n, _ in model.frozen_parameters()}
    assert frozen and not listed & frozen
    assert listed | frozen == {n for n, _ in model.named_parameters()}
    assert all(n.startswith("bkp.") for n, _ in groups["bkp"])
    assert all(n.startswith("filter_net.") for n, _ in groups["sad"])


def test_end_to_end_gradients_match_finite_differences():
    model = micro_model()
    ep = micro_episode(5)
    noise = sample_gumbel((2, 4, 8), torch.Generator().manual_seed(1), torch.float64)
    loss = lambda: model.forward_episode(ep, "train", gumbel_noise=noise).loss_total
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    errs = finite_difference_check(loss, params)
    bad = {k: v for k, v in errs.items() if v >= 1e-4}
    assert not bad, bad
    prefixes = {n.split(".")[0] for n in params}
    assert {"backbone", "text", "bkp", "filter_net"} <= prefixes
