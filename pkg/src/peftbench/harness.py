"""Training loop: AdamW, three-point linear LR schedule, tiers, early stopping."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSet, trainable_parameters
from .metrics import greedy_decode, pad_batch, score
from .model import PAD_ID, Model, decode, encode, shift_right
from .tasks import Example, TieredSplit, TierSpec, Tokenizer, get_tier

__all__ = [
    "AdamState",
    "LR_PRESETS",
    "LrTriple",
    "RunRecord",
    "TrainingError",
    "TierSpec",
    "adamw_step",
    "fingerprint",
    "lr_at",
    "train",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LrTriple:
    initial: float
    peak: float
    final: float

    def __post_init__(self):
        if min(self.initial, self.peak, self.final) <= 0:
            raise ValueError(f"learning rates must be positive, got {self}")


LR_PRESETS = {
    "full": LrTriple(3e-5, 3e-4, 3e-5),
    "lora": LrTriple(3e-4, 3e-3, 3e-4),
    "ia3": LrTriple(3e-4, 3e-3, 3e-4),
    "bitfit": LrTriple(3e-4, 3e-3, 3e-4),
    "prompt": LrTriple(3e-3, 3e-1, 3e-2),
}


def lr_at(step: int, total_steps: int, triple: LrTriple, warmup_frac: float = 0.1) -> float:
    """Linear ramp initial -> peak over ``ceil(warmup_frac * total)`` steps, then linear anneal to final."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return triple.initial
    if step == total_steps:
        return triple.final
    warm = math.ceil(warmup_frac * total_steps)
    if step <= warm:
        return triple.initial + (triple.peak - triple.initial) * step / warm
    return triple.peak + (triple.final - triple.peak) * (step - warm) / (total_steps - warm)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[ad.Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(
    params: Sequence[ad.Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> AdamState:
    """One AdamW update in place: decoupled decay, then bias-corrected Adam step."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, state {m.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        if weight_decay:
            p.data *= p.data.dtype.type(1 - lr * weight_decay)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype, copy=False)
    return state


@dataclass
class RunRecord:
    fingerprint: str
    best_epoch: int
    epochs_run: int
    wall_seconds: float
    trainable_params: int
    metric_name: str
    val_curve: list[float]
    test_metric: float
    method: str = ""
    tier: str = ""
    task: str = ""
    ablation: str = ""
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def comparable(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wall_seconds")
        return d


def fingerprint(config: dict) -> str:
    """Stable hash of a canonicalised config."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Encoded:
    src: list[list[int]]
    tgt: list[list[int]]
    text: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.src)


def encode_examples(examples: Sequence[Example], tok: Tokenizer) -> Encoded:
    return Encoded([tok.encode(e.source, eos=False) for e in examples], [tok.encode(e.target) for e in examples], [e.target for e in examples])


def batch_loss(model: Model, src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]], normalizer: float | None = None) -> ad.Tensor:
    """Token-level NLL summed over non-pad targets, divided by ``normalizer`` (default: token count)."""
    enc, enc_mask = pad_batch(src)
    targets, tmask = pad_batch(tgt)
    hidden, valid = encode(model, enc, enc_mask)
    logits = decode(model, shift_right(targets), hidden, valid)
    vocab = logits.shape[-1]
    flat = ad.reshape(logits, (-1, vocab))
    keep = np.flatnonzero(tmask.reshape(-1))
    picked = ad.take_rows(flat, keep)
    norm = float(len(keep)) if normalizer is None else float(normalizer)
    return ad.softmax_cross_entropy(picked, targets.reshape(-1)[keep], normalizer=norm)


def mean_loss(model: Model, data: Encoded, batch: int = 64) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(data), batch):
            s, t = data.src[i : i + batch], data.tgt[i : i + batch]
            n_tok = sum(len(x) for x in t)
            total += batch_loss(model, s, t, normalizer=1.0).item()
            count += n_tok
    return total / max(count, 1)


def predict(model: Model, data: Encoded, tok: Tokenizer, max_len: int, batch: int = 64) -> list[str]:
    out = []
    for i in range(0, len(data), batch):
        enc, mask = pad_batch(data.src[i : i + batch])
        for ids in greedy_decode(model, enc, max_len, encoder_mask=mask):
            out.append(tok.decode(ids))
    return out


def _snapshot(params):
    return [p.data.copy() for _, p in params]


def _restore(params, snap):
    for (_, p), s in zip(params, snap):
        p.data[...] = s


def train(
    model: Model,
    adapters: AdapterSet | None,
    split: TieredSplit,
    tokenizer: Tokenizer,
    tier: TierSpec | str,
    triple: LrTriple,
    metric: str = "accuracy",
    batch: int = 16,
    grad_accum: int = 4,
    seed: int = 0,
    warmup_frac: float = 0.1,
    weight_decay: float = 0.01,
    evaluate_fn: Callable[[Model, int], float] | None = None,
    config: dict | None = None,
) -> RunRecord:
    """Fine-tune until validation loss stops decreasing (patience 1) or the tier's epoch cap.

    The test metric is computed from the parameters of the best epoch.
    ``evaluate_fn(model, epoch)`` replaces the validation-loss computation
    (used to script stopping behaviour in tests).
    """
    start = time.perf_counter()
    if isinstance(tier, str):
        tier = get_tier(tier)
    if not split.train:
        raise TrainingError("empty training split")
    params = trainable_parameters(model, adapters)
    if not params:
        raise TrainingError("no trainable parameters")
    tensors = [p for _, p in params]
    train_set = encode_examples(split.train[: tier.max_train], tokenizer)
    val_set = encode_examples(split.val[: tier.eval_cap], tokenizer)
    test_set = encode_examples(split.test[: tier.eval_cap], tokenizer)
    n_micro = math.ceil(len(train_set) / batch)
    updates_per_epoch = math.ceil(n_micro / grad_accum)
    total_updates = updates_per_epoch * tier.max_epochs
    state = AdamState.for_params(tensors)
    rng = np.random.default_rng(seed)

    best, best_epoch, best_snap = math.inf, 0, _snapshot(params)
    curve: list[float] = []
    epochs_run = 0
    update = 0
    for epoch in range(1, tier.max_epochs + 1):
        order = rng.permutation(len(train_set))
        micro = [order[i : i + batch] for i in range(0, len(order), batch)]
        for g0 in range(0, len(micro), grad_accum):
            group = micro[g0 : g0 + grad_accum]
            n_tokens = sum(len(train_set.tgt[j]) for mb in group for j in mb)
            model.tree.zero_grad()
            for mb in group:
                loss = batch_loss(model, [train_set.src[j] for j in mb], [train_set.tgt[j] for j in mb], normalizer=n_tokens)
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, update {update}")
                loss.backward()
            lr = lr_at(min(update, total_updates), total_updates, triple, warmup_frac)
            adamw_step(tensors, [p.grad for p in tensors], state, lr, weight_decay=weight_decay)
            update += 1
        epochs_run = epoch
        val = evaluate_fn(model, epoch) if evaluate_fn else mean_loss(model, val_set)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        curve.append(float(val))
        if val < best:
            best, best_epoch, best_snap = val, epoch, _snapshot(params)
        else:
            break
    _restore(params, best_snap)
    model.tree.zero_grad()
    max_len = max(len(t) for t in train_set.tgt) + 2
    preds = predict(model, test_set, tokenizer, max_len)
    test_value = score(metric, preds, test_set.text).value
    cfg = dict(config or {})
    cfg.update({"batch": batch, "grad_accum": grad_accum, "seed": seed, "tier": tier.tier, "lr": dataclasses.asdict(triple)})
    return RunRecord(
        fingerprint=fingerprint(cfg),
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        wall_seconds=max(time.perf_counter() - start, 1e-9),
        trainable_params=int(sum(p.size for p in tensors)),
        metric_name=metric,
        val_curve=curve,
        test_metric=float(test_value),
        method=adapters.cfg.method if adapters is not None else "full",
        tier=tier.tier,
    )
