import dataclasses
import json
import math

import numpy as np
import pytest

from peftbench import autodiff as ad
from peftbench.adapters import apply_peft, trainable_parameters
from peftbench.autodiff import Tensor
from peftbench.harness import (
    LR_PRESETS,
    AdamState,
    LrTriple,
    RunRecord,
    TrainingError,
    adamw_step,
    batch_loss,
    fingerprint,
    lr_at,
    train,
)
from peftbench.model import DESK, build_model
from peftbench.selection import PeftConfig
from peftbench.tasks import TaskSpec, TierSpec, TieredSplit, Tokenizer, generate_task, get_tier, tier_split

TOK = Tokenizer()
ARCH = dataclasses.replace(DESK, vocab_size=len(TOK))
FULL = LR_PRESETS["full"]


def small_split(size=80, seed=0, kind="classification"):
    return tier_split(generate_task(TaskSpec(kind=kind, size=size, seed=seed)), get_tier("low", eval_cap=10), seed=seed)


def scripted(values):
    it = iter(values)
    return lambda model, epoch: next(it)


# ---------------------------------------------------------------------------
# schedule and optimizer


def test_lr_endpoints_and_interpolation():
    assert lr_at(0, 100, FULL) == 3e-5
    assert lr_at(10, 100, FULL) == pytest.approx(3e-4)
    assert lr_at(55, 100, FULL) == pytest.approx((3e-4 + 3e-5) / 2)
    assert lr_at(100, 100, FULL) == 3e-5
    assert lr_at(5, 100, FULL) == pytest.approx((3e-5 + 3e-4) / 2)


def test_lr_single_step_schedule():
    t = LrTriple(1.0, 2.0, 3.0)
    assert lr_at(0, 1, t) == 1.0 and lr_at(1, 1, t) == 3.0
    with pytest.raises(ValueError):
        lr_at(2, 1, t)
    with pytest.raises(ValueError):
        LrTriple(0.0, 1.0, 1.0)


def test_presets():
    assert LR_PRESETS["prompt"] == LrTriple(3e-3, 3e-1, 3e-2)
    assert LR_PRESETS["lora"] == LR_PRESETS["ia3"] == LR_PRESETS["bitfit"] == LrTriple(3e-4, 3e-3, 3e-4)


def test_adamw_closed_form():
    with ad.precision(np.float64):
        p = Tensor([2.0], requires_grad=True)
        state = AdamState.for_params([p])
        adamw_step([p], [np.array([1.0])], state, lr=0.1)
    # m_hat = v_hat = 1 after bias correction; decay multiplies by 1 - lr * wd
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01) - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adamw_zero_grad_no_decay_is_noop():
    p = Tensor([1.5, -2.0], requires_grad=True)
    before = p.data.copy()
    adamw_step([p], [np.zeros(2)], AdamState.for_params([p]), lr=0.1, weight_decay=0.0)
    assert p.data.tobytes() == before.tobytes()


def test_adamw_trajectory_repeatable():
    def run():
        p = Tensor([1.0, 2.0], requires_grad=True)
        s = AdamState.for_params([p])
        for _ in range(2):
            adamw_step([p], [np.array([0.3, -0.7])], s, lr=0.05, weight_decay=0.0)
        return p.data.tobytes()

    assert run() == run()


def test_adamw_shape_mismatch():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(3)], AdamState.for_params([p]), lr=0.1)


def test_fingerprint_is_canonical():
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})
    assert len(fingerprint({})) == 16


def test_run_record_json_roundtrip():
    rec = RunRecord("f", 2, 3, 1.5, 10, "accuracy", [1.0, 0.5, 0.7], 0.9, "lora", "low", "classification")
    assert RunRecord.from_dict(json.loads(rec.to_json())) == rec


# ---------------------------------------------------------------------------
# gradient accumulation


def test_accumulation_equals_big_batch():
    split = small_split(size=60, seed=1, kind="generation")
    src = [TOK.encode(e.source, eos=False) for e in split.train[:8]]
    tgt = [TOK.encode(e.target) for e in split.train[:8]]
    n_tok = sum(len(t) for t in tgt)
    with ad.precision(np.float64):
        model, tree = build_model(ARCH, seed=0)
        batch_loss(model, src, tgt).backward()
        whole = {k: p.tensor.grad.copy() for k, p in tree.items()}
        tree.zero_grad()
        for i in range(0, 8, 2):
            batch_loss(model, src[i : i + 2], tgt[i : i + 2], normalizer=n_tok).backward()
        for k, p in tree.items():
            assert np.max(np.abs(p.tensor.grad - whole[k])) < 1e-6, k


# ---------------------------------------------------------------------------
# training loop


def test_early_stopping_one_epoch_after_best():
    model, _ = build_model(ARCH, seed=0)
    adapters = apply_peft(model, PeftConfig(method="bitfit"))
    tier = TierSpec("t", 20, 10, 10)
    rec = train(model, adapters, small_split(), TOK, tier, LR_PRESETS["bitfit"], evaluate_fn=scripted([4, 3, 2, 1, 2, 0.5]))
    assert rec.epochs_run == 5 and rec.best_epoch == 4
    assert rec.val_curve == [4, 3, 2, 1, 2]


def test_monotone_loss_runs_to_cap():
    model, _ = build_model(ARCH, seed=0)
    adapters = apply_peft(model, PeftConfig(method="bitfit"))
    rec = train(model, adapters, small_split(), TOK, TierSpec("t", 20, 3, 10), LR_PRESETS["bitfit"], evaluate_fn=scripted([3, 2, 1]))
    assert rec.epochs_run == rec.best_epoch == 3


def test_best_epoch_parameters_are_restored():
    model, _ = build_model(ARCH, seed=0)
    adapters = apply_peft(model, PeftConfig(method="lora"))
    params = trainable_parameters(model, adapters)
    snaps = {}
    losses = [5, 2, 3]

    def evaluate(m, epoch):
        snaps[epoch] = [p.data.copy() for _, p in params]
        return losses[epoch - 1]

    rec = train(model, adapters, small_split(), TOK, TierSpec("t", 20, 5, 10), LR_PRESETS["lora"], evaluate_fn=evaluate)
    assert rec.best_epoch == 2 and rec.epochs_run == 3
    for (_, p), s in zip(params, snaps[2]):
        assert p.data.tobytes() == s.tobytes()
    assert any(p.data.tobytes() != s.tobytes() for (_, p), s in zip(params, snaps[3]))


def test_high_tier_runs_one_epoch():
    model, _ = build_model(ARCH, seed=0)
    adapters = apply_peft(model, PeftConfig(method="ia3"))
    split = tier_split(generate_task(TaskSpec(size=60)), get_tier("high", eval_cap=10), seed=0)
    rec = train(model, adapters, split, TOK, get_tier("high", eval_cap=10), LR_PRESETS["ia3"])
    assert rec.epochs_run == 1 and rec.best_epoch == 1
    assert len(split.train) == 58


@pytest.mark.parametrize("method", ["lora", "ia3", "bitfit", "prompt"])
def test_frozen_tensors_untouched_after_three_epochs(method):
    model, tree = build_model(ARCH, seed=0)
    before = tree.snapshot()
    adapters = apply_peft(model, PeftConfig(method=method, prompt_len=3))
    train(model, adapters, small_split(), TOK, TierSpec("t", 20, 3, 10), LR_PRESETS[method], evaluate_fn=scripted([3, 2, 1]))
    for k, v in before.items():
        assert tree[k].tensor.data.tobytes() == v.tobytes(), k
    assert any(tree[k].tensor.data.any() for k in adapters.paths())


def test_record_reproducible_except_wall_time():
    def run():
        model, _ = build_model(ARCH, seed=0)
        adapters = apply_peft(model, PeftConfig(method="lora"), seed=1)
        return train(model, adapters, small_split(), TOK, TierSpec("t", 30, 2, 10), LR_PRESETS["lora"], seed=5, config={"x": 1})

    a, b = run(), run()
    assert a.comparable() == b.comparable()
    assert a.wall_seconds > 0
    assert a.best_epoch <= a.epochs_run <= 2
    assert a.trainable_params == sum(t.size for _, t in trainable_parameters(build_and_lora()))


def build_and_lora():
    model, _ = build_model(ARCH, seed=0)
    apply_peft(model, PeftConfig(method="lora"))
    return model


def test_empty_split_rejected():
    model, _ = build_model(ARCH, seed=0)
    split = small_split()
    empty = TieredSplit([], split.val, split.test, "low", 0)
    with pytest.raises(TrainingError):
        train(model, None, empty, TOK, "low", FULL)


def test_non_finite_loss_aborts():
    model, tree = build_model(ARCH, seed=0)
    tree["lm_head"].tensor.data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, None, small_split(), TOK, TierSpec("t", 20, 2, 10), FULL)


def test_updates_per_epoch_follow_accumulation(monkeypatch):
    # 20 examples, batch 4, accumulation 2 -> ceil(5 / 2) = 3 updates per epoch
    import peftbench.harness as h

    model, _ = build_model(ARCH, seed=0)
    adapters = apply_peft(model, PeftConfig(method="bitfit"))
    seen = []
    orig = h.adamw_step

    def spy(params, grads, state, lr, **kw):
        seen.append(lr)
        return orig(params, grads, state, lr, **kw)

    monkeypatch.setattr(h, "adamw_step", spy)
    train(model, adapters, small_split(), TOK, TierSpec("t", 20, 2, 10), LR_PRESETS["bitfit"], batch=4, grad_accum=2, evaluate_fn=scripted([2, 1]))
    assert len(seen) == 6
    assert seen[0] == LR_PRESETS["bitfit"].initial
    assert math.isclose(seen[1], LR_PRESETS["bitfit"].peak)
