"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the "acceptance criteria"
section of the pytest summary) and then asserts the same condition.
"""
import dataclasses
import time
import timeit

import numpy as np
import pytest

from peftbench import autodiff as ad
from peftbench import report as rp
from peftbench.accounting import count_total, count_trainable, method_baselines, table4_rows
from peftbench.adapters import apply_peft, merge_lora, trainable_parameters
from peftbench.autodiff import Tensor
from peftbench.bench import GridConfig, run_matrix
from peftbench.harness import LR_PRESETS, train
from peftbench.metrics import lcs_length, rouge_l
from peftbench.model import DESK, XL, ArchConfig, build_model, forward
from peftbench.selection import DROPS, POLICIES, EmptySelectionError, LayerSelection, PeftConfig
from peftbench.tasks import Example, TaskSpec, TierSpec, Tokenizer, generate_task, get_tier, tier_split

TOK = Tokenizer()
DESK_TOK = dataclasses.replace(DESK, vocab_size=len(TOK))


def _best_time(fn, number=20):
    return min(timeit.repeat(fn, number=number, repeat=5)) / number


def test_01_total_parameters(acceptance):
    got = count_total(XL)
    secs = _best_time(lambda: count_total(XL), 200)
    ok = got == 2_849_757_184 and secs < 1e-3
    acceptance(1, ok, f"count_total(XL) = {got:,} in {secs * 1e6:.1f} us")
    assert ok


def test_02_ablation_table(acceptance):
    rows = table4_rows() + [(label, cfg, n) for label, cfg, n in method_baselines() if label in ("Prompt tuning", "BitFit")]
    wrong, worst = [], 0.0
    for label, cfg, expected in rows:
        fn = (lambda: count_total(XL)) if cfg is None else (lambda cfg=cfg: count_trainable(XL, cfg).trainable_params)
        if fn() != expected:
            wrong.append(label)
        worst = max(worst, _best_time(fn))
    ok = not wrong and worst < 1e-3 and len(rows) == 16
    acceptance(2, ok, f"{len(rows) - len(wrong)}/{len(rows)} rows exact, slowest {worst * 1e3:.3f} ms" + (f"; wrong: {wrong}" if wrong else ""))
    assert ok


def _random_pair(rng):
    arch = ArchConfig(
        vocab_size=int(rng.integers(2, 12)),
        d_model=int(rng.integers(1, 7)),
        n_heads=int(rng.integers(1, 4)),
        d_kv=int(rng.integers(1, 5)),
        d_ff=int(rng.integers(1, 8)),
        n_encoder_layers=int(rng.integers(0, 5)),
        n_decoder_layers=int(rng.integers(0, 5)),
        ff_variant=str(rng.choice(["gated", "ungated"])),
        rel_pos_buckets=int(rng.integers(0, 7)),
    )
    ia3_sites = ["q-out", "k-out", "v-out", "o-out", "ff-intermediate", "ff-out"]
    cfg = PeftConfig(
        method=str(rng.choice(["full", "lora", "ia3", "bitfit", "prompt"])),
        lora_rank=int(rng.integers(1, 4)),
        lora_targets=frozenset(rng.choice(list("qkvo"), size=int(rng.integers(1, 5)), replace=False).tolist()),
        ia3_targets=frozenset(rng.choice(ia3_sites, size=int(rng.integers(1, 7)), replace=False).tolist()),
        prompt_len=int(rng.integers(1, 5)),
        layer_selection=LayerSelection(str(rng.choice(POLICIES)), int(rng.integers(0, 100))),
        submodule_drops=frozenset(rng.choice(DROPS, size=int(rng.integers(0, 3)), replace=False).tolist()),
    )
    return arch, cfg


def test_03_oracle_count_equivalence(acceptance):
    rng = np.random.default_rng(2024)
    n_pairs, mismatches, empty = 60, [], 0
    for i in range(n_pairs):
        arch, cfg = _random_pair(rng)
        model, tree = build_model(arch, seed=i)
        if sum(p.size for p in tree.entries.values()) != count_total(arch):
            mismatches.append((i, "total"))
        try:
            symbolic = count_trainable(arch, cfg).trainable_params
        except EmptySelectionError:
            empty += 1
            try:
                apply_peft(model, cfg, seed=i)
                mismatches.append((i, "empty"))
            except EmptySelectionError:
                pass
            continue
        apply_peft(model, cfg, seed=i)
        if symbolic != sum(t.size for _, t in trainable_parameters(model)):
            mismatches.append((i, "trainable"))
    ok = not mismatches
    acceptance(3, ok, f"{n_pairs} seeded random pairs ({empty} empty selections), mismatches: {mismatches or 'none'}")
    assert ok


def test_04_derived_table_exactness(acceptance):
    start = time.perf_counter()
    fx = rp.FixtureSet.load()
    n5, bad5 = rp.derivation_check(fx, rp.perf_per_params(fx), "perf_per_params", abs_tol=1e-4)
    n6, bad6 = rp.derivation_check(fx, rp.perf_per_minute(fx), "perf_per_minute", rel_tol=0.05, exempt=("lora",))
    secs = time.perf_counter() - start
    ok = not bad5 and not bad6 and secs < 1.0
    detail = f"per-params {n5 - len(bad5)}/{n5} within 1e-4 abs, per-minute {n6 - len(bad6)}/{n6} within 5% rel"
    for m in bad5 + bad6:
        detail += f"; {'/'.join(m.key)} computed {m.computed:.6g} vs published {m.published:.6g} (err {m.error:.3g} > {m.tolerance:g})"
    acceptance(4, ok, detail)
    assert ok, detail


def test_05_decision_framework(acceptance):
    start = time.perf_counter()
    fx = rp.FixtureSet.load()
    picks = {(c, t): rp.recommend(fx, c, t) for c, t in [("memory", "low"), ("memory", "medium"), ("memory", "high"), ("time", "low"), ("time", "medium"), ("performance", "high")]}
    winners = {k: {m for w in r.per_dataset.values() for m in w} for k, r in picks.items()}
    checks = {
        "memory/low -> BitFit and (IA)3": winners[("memory", "low")] == {"bitfit", "ia3"},
        "memory/medium -> (IA)3": picks[("memory", "medium")].methods == ("ia3",) and winners[("memory", "medium")] == {"ia3"},
        "memory/high -> (IA)3": picks[("memory", "high")].methods == ("ia3",) and winners[("memory", "high")] == {"ia3"},
        "time/low -> full": picks[("time", "low")].methods == ("full",),
        "time/medium -> full": picks[("time", "medium")].methods == ("full",),
        "performance/high -> full": "full" in picks[("performance", "high")].methods,
    }
    secs = time.perf_counter() - start
    ok = all(checks.values()) and all(r.provenance for r in picks.values()) and secs < 1.0
    failed = [k for k, v in checks.items() if not v]
    acceptance(5, ok, f"{sum(checks.values())}/{len(checks)} stated picks reproduced by argmax" + (f"; failed: {failed}" if failed else ""))
    assert ok


def _gradcheck_all():
    rng = np.random.default_rng(0)

    def r(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    a, b, v = r(3, 4), r(3, 4), r(4)
    x3, y3, w = r(2, 3, 4), r(2, 1, 4), r(4, 5)
    table = r(5, 4)
    logits = r(6, 5)
    ids = np.array([[0, 3, 3], [4, 0, 1]])
    cases = {
        "add": (lambda: ad.add(a, b), [a, b]),
        "sub": (lambda: ad.sub(a, b), [a, b]),
        "mul": (lambda: ad.mul(a, b), [a, b]),
        "scale": (lambda: ad.scale(a, 0.7), [a]),
        "scale_by_vector": (lambda: ad.scale_by_vector(a, v), [a, v]),
        "add_vector": (lambda: ad.add_vector(a, v), [a, v]),
        "add_const": (lambda: ad.add_const(a, np.ones((3, 4))), [a]),
        "relu": (lambda: ad.relu(a), [a]),
        "gelu": (lambda: ad.gelu(a), [a]),
        "reshape": (lambda: ad.reshape(x3, (6, 4)), [x3]),
        "transpose": (lambda: ad.transpose(x3, (1, 0, 2)), [x3]),
        "expand": (lambda: ad.expand(v, (2, 3)), [v]),
        "concat": (lambda: ad.concat([y3, x3], axis=1), [x3, y3]),
        "embedding": (lambda: ad.embedding(table, ids), [table]),
        "take_rows": (lambda: ad.take_rows(a, [2, 0, 0]), [a]),
        "matmul": (lambda: ad.matmul(x3, w), [x3, w]),
        "softmax": (lambda: ad.softmax(x3), [x3]),
        "rmsnorm": (lambda: ad.rmsnorm(x3, v), [x3, v]),
        "softmax_cross_entropy": (lambda: ad.softmax_cross_entropy(logits, [0, 1, 4, 2, 2, 3]), [logits]),
    }
    errors = {}
    for name, (fn, inputs) in cases.items():
        shape = fn().shape
        probe = Tensor(rng.standard_normal(shape)) if shape else None
        f = (lambda fn=fn, probe=probe: ad.mul(fn(), probe)) if probe is not None else fn
        errors[name] = ad.gradcheck(f, inputs)
    return errors


def test_06_gradient_correctness(acceptance):
    with ad.precision(np.float64):
        errors = _gradcheck_all()
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values())
    acceptance(6, ok, f"{len(errors)} ops at float64, worst {worst} rel err {errors[worst]:.2e}")
    assert ok


def test_07_identity_at_init_and_merge(acceptance):
    enc, dec = np.array([[5, 6, 7, 8], [9, 10, 11, 12]]), np.array([[0, 3, 4], [0, 13, 14]])
    diffs = {}
    for method in ("lora", "ia3", "bitfit"):
        model, _ = build_model(DESK, seed=0)
        base = forward(model, enc, dec).data.copy()
        apply_peft(model, PeftConfig(method=method), seed=1)
        diffs[method] = float(np.max(np.abs(forward(model, enc, dec).data - base)))
    model, _ = build_model(DESK_TOK, seed=0)
    adapters = apply_peft(model, PeftConfig(method="lora", lora_rank=2), seed=1)
    split = tier_split(generate_task(TaskSpec(size=120, seed=1)), get_tier("low", eval_cap=10), seed=0)
    train(model, adapters, split, TOK, TierSpec("t", 40, 3, 10), LR_PRESETS["lora"], evaluate_fn=lambda m, e: 3.0 - e)
    adapted = forward(model, enc, dec).data.copy()
    trained_b = max(float(np.abs(model.tree[p].tensor.data).max()) for p in adapters.paths() if p.endswith("lora_B"))
    merge_lora(model, adapters)
    merge_err = float(np.max(np.abs(forward(model, enc, dec).data - adapted)))
    ok = all(d == 0.0 for d in diffs.values()) and trained_b > 0 and merge_err < 1e-5
    acceptance(7, ok, f"init diffs {diffs}; merge after training max abs diff {merge_err:.2e}")
    assert ok


def test_08_freeze_invariant(acceptance):
    split = tier_split(generate_task(TaskSpec(size=120, seed=2)), get_tier("low", eval_cap=10), seed=0)
    changed, epochs = {}, {}
    for method in ("lora", "ia3", "bitfit", "prompt"):
        model, tree = build_model(DESK_TOK, seed=0)
        before = tree.snapshot()
        adapters = apply_peft(model, PeftConfig(method=method, prompt_len=3), seed=0)
        rec = train(model, adapters, split, TOK, TierSpec("t", 40, 3, 10), LR_PRESETS[method], evaluate_fn=lambda m, e: 3.0 - e)
        epochs[method] = rec.epochs_run
        changed[method] = [k for k, v in before.items() if tree[k].tensor.data.tobytes() != v.tobytes()]
    ok = all(not c for c in changed.values()) and all(e == 3 for e in epochs.values())
    acceptance(8, ok, f"epochs {epochs}; frozen tensors changed: {sum(len(c) for c in changed.values())}")
    assert ok


@pytest.mark.slow
def test_09_desk_learnability(acceptance, tmp_path):
    start = time.perf_counter()
    grid = GridConfig()  # both tasks, medium tier, all five methods, pretrained desk base
    records = run_matrix(grid, out_dir=tmp_path, cache_dir=tmp_path)
    secs = time.perf_counter() - start
    scores = {(r.task, r.method): r.test_metric for r in records}
    bars = {"classification": 0.95, "generation": 0.90}
    low = {k: v for k, v in scores.items() if v < bars[k[0]]}
    errors = [r.error for r in records if r.error]
    ok = len(records) == 10 and not errors and not low and secs <= 600
    acc = ", ".join(f"{m}={scores[('classification', m)]:.3f}" for m in grid.methods)
    rl = ", ".join(f"{m}={scores[('generation', m)]:.3f}" for m in grid.methods)
    acceptance(9, ok, f"accuracy [{acc}]; rouge-l [{rl}]; {secs:.0f} s total")
    assert ok


def test_10_harness_protocol(acceptance):
    split = tier_split(generate_task(TaskSpec(size=120, seed=3)), get_tier("low", eval_cap=10), seed=0)
    model, _ = build_model(DESK_TOK, seed=0)
    adapters = apply_peft(model, PeftConfig(method="bitfit"))
    losses = iter([0.9, 0.8, 0.7, 0.6, 0.65, 0.1])
    rec = train(model, adapters, split, TOK, TierSpec("t", 40, 10, 10), LR_PRESETS["bitfit"], evaluate_fn=lambda m, e: next(losses))
    stop_ok = rec.best_epoch == 4 and rec.epochs_run == 5

    model, _ = build_model(DESK_TOK, seed=0)
    adapters = apply_peft(model, PeftConfig(method="bitfit"))
    high = get_tier("high", eval_cap=10)
    rec_high = train(model, adapters, tier_split(generate_task(TaskSpec(size=80)), high, seed=0), TOK, high, LR_PRESETS["bitfit"])
    high_ok = rec_high.epochs_run == 1

    big = [Example(f"s{i}", f"t{i}") for i in range(20000)]
    sizes = {}
    for name in ("low", "medium", "high"):
        s = tier_split(big, name, seed=0)
        sizes[name] = (len(s.train), len(s.val), len(s.test), get_tier(name).max_epochs)
    caps_ok = sizes == {"low": (100, 2500, 2500, 10), "medium": (1000, 2500, 2500, 5), "high": (10000, 2500, 2500, 1)}
    ok = stop_ok and high_ok and caps_ok
    acceptance(10, ok, f"stop at epoch {rec.epochs_run} (best {rec.best_epoch}); high tier epochs {rec_high.epochs_run}; caps {sizes}")
    assert ok


def test_11_metric_oracles(acceptance):
    from functools import lru_cache

    def brute(a, b):
        @lru_cache(maxsize=None)
        def go(i, j):
            if i == len(a) or j == len(b):
                return 0
            return 1 + go(i + 1, j + 1) if a[i] == b[j] else max(go(i + 1, j), go(i, j + 1))

        return go(0, 0)

    start = time.perf_counter()
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(200):
        a = tuple(rng.choice(list("abcde"), size=int(rng.integers(1, 12))))
        b = tuple(rng.choice(list("abcde"), size=int(rng.integers(1, 12))))
        lcs = brute(a, b)
        p, rr = lcs / len(a), lcs / len(b)
        expected = 0.0 if lcs == 0 else 2 * p * rr / (p + rr)
        if lcs_length(a, b) != lcs or rouge_l(list(a), list(b)) != pytest.approx(expected, abs=1e-12):
            bad += 1
    worked = rouge_l("the cat sat on mat", "the cat is on the mat")
    secs = time.perf_counter() - start
    ok = bad == 0 and abs(worked - 0.7273) <= 1e-4 and secs < 1.0
    acceptance(11, ok, f"200 random pairs, {bad} disagreements; worked example {worked:.4f}; {secs * 1e3:.0f} ms")
    assert ok
