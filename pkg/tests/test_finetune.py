"""Quantization-aware fine-tuning under fixed policies, plus the searched-vs-uniform check."""

from pathlib import Path

import numpy as np
import pytest

from mpq_forge.allocator import uniform_policy
from mpq_forge.config import load_config
from mpq_forge.costs import layer_stats
from mpq_forge.pipeline import (
    evaluate, finetune_with_policy, load_dataset, make_model, policy_pairs, pretrain, stage_indicators,
    stage_search, uniform_baseline,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def mlp_setup():
    cfg = load_config(CONFIGS / "mlp.toml")
    data = load_dataset(cfg)
    return cfg, data


def _uniform(model, b):
    return uniform_policy(model.layer_names, layer_stats(model), b, b)


def test_bypass_policy_reproduces_full_precision(mlp_setup):
    cfg, data = mlp_setup
    model = make_model(cfg, data, 0)
    fp = pretrain(model, data, cfg, 0)["top1"]
    pairs = policy_pairs(model, _uniform(model, 32), data.train_x[:64])
    assert all(w is None and a is None for w, a in pairs)
    assert evaluate(model, pairs, data) == fp
    tuned = finetune_with_policy(model, _uniform(model, 32), data, cfg, 0).top1
    assert abs(tuned - fp) <= 0.005


def test_two_bit_does_not_beat_eight_bit(mlp_setup):
    cfg, data = mlp_setup
    wins = 0
    for seed in range(10):
        model = make_model(cfg, data, seed)
        pretrain(model, data, cfg, seed)
        low = finetune_with_policy(model, _uniform(model, 2), data, cfg, seed).top1
        high = finetune_with_policy(model, _uniform(model, 8), data, cfg, seed).top1
        wins += low <= high
    assert wins >= 9


def test_finetune_leaves_input_model_untouched(mlp_setup):
    cfg, data = mlp_setup
    model = make_model(cfg, data, 1)
    before = [p.data.copy() for p in model.parameters()]
    result = finetune_with_policy(model, _uniform(model, 4), data, cfg, 1)
    assert all(np.array_equal(p.data, b) for p, b in zip(model.parameters(), before))
    assert len(result.loss_curve) == cfg.finetune.steps and np.all(np.isfinite(result.loss_curve))


@pytest.mark.slow
def test_searched_policy_holds_up_against_uniform_three_bit(tmp_path):
    """Held-out seeds 5..9 on the CNN: searched >= uniform 3-bit - 0.5% on at least 4 of 5."""
    cfg = load_config(CONFIGS / "cnn_ablation.toml")
    data = load_dataset(cfg)
    ok, rows = 0, []
    for seed in range(5, 10):
        shared = tmp_path / f"seed_{seed}"
        shared.mkdir()
        model = make_model(cfg, data, seed)
        pretrain(model, data, cfg, seed)
        stage_indicators(cfg, model, data, seed, shared)
        policy, _, _ = stage_search(cfg, shared, shared, reversed=False)
        searched = finetune_with_policy(model, policy, data, cfg, seed).top1
        uniform = finetune_with_policy(model, uniform_baseline(cfg, shared), data, cfg, seed).top1
        ok += searched >= uniform - 0.005
        rows.append((seed, searched, uniform))
    assert ok >= 4, rows
