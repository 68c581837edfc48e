"""Deterministic synthetic text-to-text tasks and tiered splits.

Two task families share one word-level vocabulary:

classification
    A sequence of filler words with ``n_markers`` class-marker words mixed
    in. The label is the class holding the strict majority of markers,
    rendered as a word (``classA``, ``classB``...).

generation
    A shuffled key-value record (``name X food Y area Z``) mapped to a
    templated sentence (``X serves Y food in Z``).

Each family has a few *variants* (alternative label words or sentence
templates). A variant can be requested with an instruction word in front
of the input (``<cls2> ...``); the multi-variant instructed mixture is used
to build a pretrained base model, and the downstream tasks use variant 0
without instructions.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import EOS_ID, PAD_ID

SPECIALS = ("<pad>", "</s>", "<unk>")
N_VARIANTS = 4
LABEL_PREFIXES = ("class", "type", "kind", "group")
MAX_CLASSES = 8

NAMES = (
    "alimentum aromi bibimbap clowns cocum cotto fitzbillies giraffe loch midsummer "
    "strada taste wildwood zizzi brazen elan fenwick gaucho juniper kismet "
    "larder mimosa nadia orchard pavilion quince rustica saffron tamarind umami"
).split()
FOODS = "chinese english french indian italian japanese fast thai greek spanish korean mexican turkish nepali persian".split()
AREAS = "riverside centre north south east west harbour market uptown village".split()
GEN_WORDS = ("name", "food", "area", "serves", "in", "at", "has", "near", "try", "for", "is", "a", "place")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "classification"
    n_classes: int = 4
    vocab: int = 40  # filler words for classification
    seed: int = 0
    size: int = 1400
    seq_len: int = 10
    n_markers: int = 3
    markers_per_class: int = 2
    variant: int = 0
    instruction: bool = False

    def validate(self) -> "TaskSpec":
        if self.kind not in ("classification", "generation"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.size < 1:
            raise TaskError("size must be >= 1")
        if not 0 <= self.variant < N_VARIANTS:
            raise TaskError(f"variant must be in [0, {N_VARIANTS})")
        if self.kind == "classification":
            if not 2 <= self.n_classes <= MAX_CLASSES:
                raise TaskError(f"n_classes must be in [2, {MAX_CLASSES}]")
            if self.vocab < self.n_classes:
                raise TaskError(f"degenerate spec: vocab {self.vocab} < n_classes {self.n_classes}")
            if self.n_markers < 1 or self.seq_len < self.n_markers:
                raise TaskError("need 1 <= n_markers <= seq_len")
        return self


@dataclass(frozen=True)
class Example:
    source: str
    target: str
    label: str | None = None

    def key(self) -> str:
        return hashlib.sha1(self.source.encode()).hexdigest()


def class_letter(c: int) -> str:
    return "ABCDEFGH"[c]


def label_word(c: int, variant: int = 0) -> str:
    return f"{LABEL_PREFIXES[variant]}{class_letter(c)}"


def marker_word(c: int, j: int) -> str:
    return f"m{class_letter(c)}{j}"


def render_record(record: dict[str, str], variant: int = 0) -> str:
    """Templated sentence for a restaurant record."""
    name, food, area = record["name"], record["food"], record.get("area")
    if variant == 0:
        s = f"{name} serves {food} food"
        return s + (f" in {area}" if area else "")
    if variant == 1:
        s = f"{food} food at {name}"
        return s + (f" in {area}" if area else "")
    if variant == 2:
        s = f"{name} has {food} food"
        return s + (f" near {area}" if area else "")
    s = f"try {name} for {food} food"
    return s + (f" in {area}" if area else "")


def linearize(record: dict[str, str], order) -> str:
    return " ".join(f"{k} {record[k]}" for k in order if k in record)


def majority_label(markers: list[int]) -> int | None:
    counts = np.bincount(markers)
    top = counts.max()
    return int(counts.argmax()) if (counts == top).sum() == 1 else None


def _instruction(kind: str, variant: int) -> str:
    return f"<{'cls' if kind == 'classification' else 'gen'}{variant}>"


def generate_task(spec: TaskSpec) -> list[Example]:
    """Deterministic, duplicate-free corpus for ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0 if spec.kind == "classification" else 1, spec.variant])
    seen: set[str] = set()
    out: list[Example] = []
    prefix = _instruction(spec.kind, spec.variant) + " " if spec.instruction else ""
    attempts = 0
    while len(out) < spec.size:
        attempts += 1
        if attempts > 50 * spec.size + 1000:
            raise TaskError(f"cannot draw {spec.size} distinct examples from this spec")
        if spec.kind == "classification":
            # labels cycle so every prefix of the corpus is near-uniform
            c = len(out) % spec.n_classes
            n_major = int(rng.integers(spec.n_markers // 2 + 1, spec.n_markers + 1))
            others = [int(x) for x in rng.integers(0, spec.n_classes - 1, size=spec.n_markers - n_major)]
            markers = [c] * n_major + [o if o < c else o + 1 for o in others]
            if majority_label(markers) != c:
                continue
            words = [f"w{int(i)}" for i in rng.integers(0, spec.vocab, size=spec.seq_len - spec.n_markers)]
            for m in markers:
                pos = int(rng.integers(0, len(words) + 1))
                words.insert(pos, marker_word(m, int(rng.integers(0, spec.markers_per_class))))
            ex = Example(prefix + " ".join(words), label_word(c, spec.variant), label_word(c, spec.variant))
        else:
            record = {"name": NAMES[rng.integers(len(NAMES))], "food": FOODS[rng.integers(len(FOODS))]}
            if rng.random() < 0.5:
                record["area"] = AREAS[rng.integers(len(AREAS))]
            order = list(record)
            rng.shuffle(order)
            ex = Example(prefix + linearize(record, order), render_record(record, spec.variant))
        if ex.source in seen:
            continue
        seen.add(ex.source)
        out.append(ex)
    return out


def classification_vocabulary(n_classes: int = MAX_CLASSES, filler: int = 40, markers_per_class: int = 2) -> list[str]:
    words = [f"w{i}" for i in range(filler)]
    words += [marker_word(c, j) for c in range(n_classes) for j in range(markers_per_class)]
    words += [label_word(c, v) for v in range(N_VARIANTS) for c in range(n_classes)]
    return words


def default_vocabulary(filler: int = 40) -> list[str]:
    words = list(SPECIALS)
    words += [_instruction(k, v) for k in ("classification", "generation") for v in range(N_VARIANTS)]
    words += classification_vocabulary(filler=filler)
    words += list(NAMES) + list(FOODS) + list(AREAS) + list(GEN_WORDS)
    dedup = list(dict.fromkeys(words))
    return dedup


class Tokenizer:
    """Whitespace tokenizer over a fixed word list; ids 0/1/2 are pad, eos, unk."""

    def __init__(self, words: list[str] | None = None):
        words = default_vocabulary() if words is None else list(words)
        if tuple(words[:3]) != SPECIALS:
            raise TaskError("vocabulary must start with <pad>, </s>, <unk>")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, eos: bool = True) -> list[int]:
        ids = [self.index.get(w, 2) for w in text.split()]
        return ids + [EOS_ID] if eos else ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            out.append(self.words[i] if i < len(self.words) else "<unk>")
        return " ".join(out)


@dataclass
class TierSpec:
    tier: str
    max_train: int
    max_epochs: int
    eval_cap: int = 2500


TIERS = {
    "low": TierSpec("low", 100, 10),
    "medium": TierSpec("medium", 1000, 5),
    "high": TierSpec("high", 10000, 1),
}


def get_tier(name: str, eval_cap: int | None = None) -> TierSpec:
    try:
        base = TIERS[name]
    except KeyError:
        raise TaskError(f"unknown tier {name!r}; expected one of {sorted(TIERS)}") from None
    return TierSpec(base.tier, base.max_train, base.max_epochs, base.eval_cap if eval_cap is None else eval_cap)


@dataclass
class TieredSplit:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    tier: str
    seed: int
    meta: dict = field(default_factory=dict)


def _stratified_order(examples: list[Example], rng: np.random.Generator) -> list[Example]:
    groups: dict[str, list[Example]] = {}
    for ex in examples:
        groups.setdefault(ex.label, []).append(ex)
    lists = []
    for label in sorted(groups):
        g = groups[label]
        lists.append([g[i] for i in rng.permutation(len(g))])
    out = []
    for i in range(max(len(g) for g in lists)):
        for g in lists:
            if i < len(g):
                out.append(g[i])
    return out


def tier_split(examples: list[Example], tier: TierSpec | str, seed: int = 0) -> TieredSplit:
    """Seeded shuffle, then train from the front and val/test from the back.

    ``|train| = min(max_train, n - 2)``; val and test each get
    ``min(eval_cap, (n - |train|) // 2)``. Labelled corpora are interleaved
    by class after shuffling so every split stays class-balanced.
    """
    if isinstance(tier, str):
        tier = get_tier(tier)
    n = len(examples)
    if n < 3:
        raise TaskError(f"need at least 3 examples to split, got {n}")
    rng = np.random.default_rng(seed)
    if all(ex.label is not None for ex in examples):
        order = _stratified_order(examples, rng)
    else:
        order = [examples[i] for i in rng.permutation(n)]
    n_train = min(tier.max_train, n - 2)
    n_eval = max(1, min(tier.eval_cap, (n - n_train) // 2))
    train = order[:n_train]
    test = order[n - n_eval :]
    val = order[n - 2 * n_eval : n - n_eval]
    return TieredSplit(train, val, test, tier.tier, seed)


def dump_corpus(examples: list[Example], path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            if "\t" in ex.source or "\t" in ex.target or "\n" in ex.source + ex.target:
                raise TaskError("example text may not contain tabs or newlines")
            fh.write(f"{ex.source}\t{ex.target}\n")


def load_corpus(path, labelled: bool | None = None) -> list[Example]:
    """Read ``input TAB target`` lines; ``labelled`` marks targets as class labels."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        src, tgt = line.split("\t")
        rows.append((src, tgt))
    if labelled is None:
        labelled = bool(rows) and len({t for _, t in rows}) <= max(2, len(rows) // 4)
    return [Example(s, t, t if labelled else None) for s, t in rows]
