from functools import lru_cache

import numpy as np
import pytest

from peftbench import _kernels
from peftbench.adapters import apply_peft, trainable_parameters
from peftbench.harness import AdamState, adamw_step, batch_loss
from peftbench.metrics import accuracy, exact_match, greedy_decode, lcs_length, mean_rouge_l, rouge_l, score
from peftbench.model import DESK, build_model
from peftbench.selection import PeftConfig


def brute_lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def random_pairs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    words = list("abcdef")
    for _ in range(n):
        a = [words[i] for i in rng.integers(0, 6, size=rng.integers(0, 12))]
        b = [words[i] for i in rng.integers(0, 6, size=rng.integers(1, 12))]
        yield a, b


def test_lcs_matches_brute_force():
    for a, b in random_pairs():
        assert lcs_length(a, b) == brute_lcs(tuple(a), tuple(b))


def test_lcs_kernels_agree():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.integers(0, 5, size=rng.integers(0, 30))
        b = rng.integers(0, 5, size=rng.integers(0, 30))
        assert _kernels._lcs_length_np(a, b) == brute_lcs(tuple(a), tuple(b))
        if _kernels.HAS_NUMBA:
            assert _kernels._lcs_length_nb(a, b) == _kernels._lcs_length_np(a, b)


def test_rouge_worked_example():
    # LCS "the cat on mat": P = 4/5, R = 4/6
    assert rouge_l("the cat sat on mat", "the cat is on the mat") == pytest.approx(0.7273, abs=1e-4)


def test_rouge_edge_cases():
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b", "c d") == 0.0
    assert rouge_l("", "a") == 0.0
    with pytest.raises(ValueError):
        rouge_l("a", "")


def test_rouge_bounds_and_symmetry():
    for a, b in random_pairs(seed=1):
        if not a:
            continue
        v = rouge_l(a, b)
        assert 0.0 <= v <= 1.0
        if len(a) == len(b):
            assert v == pytest.approx(rouge_l(b, a))


def test_exact_match():
    assert exact_match("classA", "classA") == 1
    assert exact_match("classA ", "classA") == 1
    assert exact_match("classa", "classA") == 0


def test_aggregates():
    assert accuracy(["a", "b"], ["a", "c"]).value == 0.5
    mv = mean_rouge_l(["a b", "c"], ["a b", "d"])
    assert (mv.value, mv.n, mv.name) == (0.5, 2, "rouge-l")
    with pytest.raises(ValueError):
        score("bleu", ["a"], ["a"])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_greedy_single_token_and_determinism():
    model, _ = build_model(DESK, seed=0)
    src = np.array([5, 6, 7])
    assert len(greedy_decode(model, src, 1)) == 1
    assert greedy_decode(model, src, 6) == greedy_decode(model, src, 6)
    batch = greedy_decode(model, np.array([[5, 6, 7], [8, 9, 10]]), 4)
    assert batch[0] == greedy_decode(model, src, 4)
    with pytest.raises(ValueError):
        greedy_decode(model, src, 0)


def test_overfit_single_pair_reproduces_target():
    model, _ = build_model(DESK, seed=0)
    adapters = apply_peft(model, PeftConfig(method="full"))
    params = [t for _, t in trainable_parameters(model, adapters)]
    state = AdamState.for_params(params)
    src, tgt = [5, 9, 12, 3], [20, 21, 22, 1]
    for _ in range(60):
        model.tree.zero_grad()
        batch_loss(model, [src], [tgt]).backward()
        adamw_step(params, [p.grad for p in params], state, lr=1e-2, weight_decay=0.0)
    assert greedy_decode(model, np.array(src), 8) == tgt
