"""Greedy decoding, exact-match accuracy and sentence-level ROUGE-L (F1)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import autodiff as ad
from .model import EOS_ID, PAD_ID, Model, decode, encode


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    n: int


def exact_match(pred: str, gold: str) -> int:
    """1 iff equal after stripping outer whitespace (case-sensitive)."""
    return int(pred.strip() == gold.strip())


def lcs_length(a: Sequence, b: Sequence) -> int:
    # map tokens to ints so the kernel can work on int arrays
    table: dict = {}
    ia = np.array([table.setdefault(t, len(table)) for t in a], dtype=np.int64)
    ib = np.array([table.setdefault(t, len(table)) for t in b], dtype=np.int64)
    return _kernels.lcs_length(ia, ib)


def rouge_l(candidate, reference) -> float:
    """ROUGE-L F1 between token lists (strings are whitespace-split)."""
    if isinstance(candidate, str):
        candidate = candidate.split()
    if isinstance(reference, str):
        reference = reference.split()
    if not reference:
        raise ValueError("rouge_l: reference must be non-empty")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> MetricValue:
    if not preds or len(preds) != len(golds):
        raise ValueError("accuracy needs equally many (>= 1) predictions and references")
    return MetricValue("accuracy", float(np.mean([exact_match(p, g) for p, g in zip(preds, golds)])), len(preds))


def mean_rouge_l(preds: Sequence[str], golds: Sequence[str]) -> MetricValue:
    if not preds or len(preds) != len(golds):
        raise ValueError("rouge-l needs equally many (>= 1) predictions and references")
    return MetricValue("rouge-l", float(np.mean([rouge_l(p, g) for p, g in zip(preds, golds)])), len(preds))


def score(name: str, preds: Sequence[str], golds: Sequence[str]) -> MetricValue:
    if name == "accuracy":
        return accuracy(preds, golds)
    if name == "rouge-l":
        return mean_rouge_l(preds, golds)
    raise ValueError(f"unknown metric {name!r}")


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def greedy_decode(model: Model, encoder_tokens, max_len: int, encoder_mask=None) -> list[list[int]] | list[int]:
    """Argmax decoding until EOS or ``max_len`` tokens.

    Accepts a single sequence (returns one token list) or a padded batch.
    A generated EOS is kept as the last token, so ``max_len=1`` always
    yields exactly one token.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    single = np.asarray(encoder_tokens).ndim == 1
    with ad.no_grad():
        hidden, valid = encode(model, encoder_tokens, encoder_mask)
        batch = hidden.shape[0]
        dec = np.full((batch, 1), PAD_ID, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            logits = decode(model, dec, hidden, valid).data[:, -1, :]
            nxt = logits.argmax(axis=-1)
            for i in range(batch):
                if not done[i]:
                    outs[i].append(int(nxt[i]))
                    done[i] = nxt[i] == EOS_ID
            if done.all():
                break
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return outs[0] if single else outs
