"""T5-style encoder-decoder built on :mod:`peftbench.autodiff`.

Parameter paths follow the HuggingFace T5 vocabulary so that adapter
targeting and ablations can be phrased in terms of ``SelfAttention``,
``EncDecAttention`` and ``DenseReluDense`` blocks::

    shared                                   token embedding (shared enc/dec input)
    encoder.block.{i}.SelfAttention.{q,k,v,o}
    encoder.block.0.SelfAttention.relative_attention_bias
    encoder.block.{i}.SelfAttention.norm
    encoder.block.{i}.DenseReluDense.{wi | wi_0,wi_1},wo
    encoder.block.{i}.DenseReluDense.norm
    encoder.final_layer_norm
    decoder.block.{i}.EncDecAttention.{q,k,v,o,norm}
    ...
    lm_head                                  untied output projection

Linear weights are stored ``[d_in, d_out]`` so a projection is ``x @ W``.
Adapter tensors live in the same tree under the host path plus a suffix
(``.lora_A``, ``.lora_B``, ``.ia3``, ``.bias``) and are picked up by the
forward pass automatically.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID = 0
EOS_ID = 1

BASE_KINDS = frozenset(
    {
        "attention-q",
        "attention-k",
        "attention-v",
        "attention-o",
        "ff-in",
        "ff-in-gate",
        "ff-out",
        "norm",
        "embedding",
        "rel-pos-bias",
    }
)
ADAPTER_KINDS = frozenset({"adapter", "bias-injected", "prompt"})

_PROJ_KIND = {"q": "attention-q", "k": "attention-k", "v": "attention-v", "o": "attention-o"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    d_kv: int
    d_ff: int
    n_encoder_layers: int
    n_decoder_layers: int
    ff_variant: str = "gated"
    rel_pos_buckets: int = 32
    rel_pos_max_distance: int = 128

    @property
    def inner_dim(self) -> int:
        return self.n_heads * self.d_kv

    def validate(self) -> "ArchConfig":
        for name in ("vocab_size", "d_model", "n_heads", "d_kv", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("n_encoder_layers", "n_decoder_layers", "rel_pos_buckets"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.ff_variant not in ("gated", "ungated"):
            raise ConfigError(f"ff_variant must be 'gated' or 'ungated', got {self.ff_variant!r}")
        if self.rel_pos_max_distance < 1:
            raise ConfigError("rel_pos_max_distance must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ArchConfig fields: {sorted(unknown)}")
        return cls(**d).validate()


# FLAN-T5-XL public configuration; only ever used symbolically.
XL = ArchConfig(
    vocab_size=32128,
    d_model=2048,
    n_heads=32,
    d_kv=64,
    d_ff=5120,
    n_encoder_layers=24,
    n_decoder_layers=24,
    ff_variant="gated",
    rel_pos_buckets=32,
)

DESK = ArchConfig(
    vocab_size=64,
    d_model=32,
    n_heads=4,
    d_kv=8,
    d_ff=64,
    n_encoder_layers=2,
    n_decoder_layers=2,
    ff_variant="gated",
    rel_pos_buckets=8,
    rel_pos_max_distance=16,
)

PRESETS = {"xl": XL, "flan-t5-xl": XL, "desk": DESK}


@dataclass
class Param:
    tensor: Tensor
    trainable: bool
    kind: str

    @property
    def size(self) -> int:
        return self.tensor.size


@dataclass
class ParamTree:
    """Ordered path -> :class:`Param` mapping."""

    entries: dict[str, Param] = field(default_factory=dict)

    def add(self, path: str, tensor: Tensor, kind: str, trainable: bool = True) -> Param:
        if path in self.entries:
            raise KeyError(f"duplicate parameter path {path!r}")
        p = Param(tensor, trainable, kind)
        tensor.requires_grad = trainable
        self.entries[path] = p
        return p

    def remove(self, path: str) -> Param:
        return self.entries.pop(path)

    def set_trainable(self, path: str, flag: bool) -> None:
        p = self.entries[path]
        p.trainable = flag
        p.tensor.requires_grad = flag

    def __getitem__(self, path: str) -> Param:
        return self.entries[path]

    def get(self, path: str):
        p = self.entries.get(path)
        return None if p is None else p.tensor

    def __contains__(self, path: str) -> bool:
        return path in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def total(self, base_only: bool = True) -> int:
        return sum(p.size for p in self.entries.values() if not base_only or p.kind in BASE_KINDS)

    def trainable_count(self) -> int:
        return sum(p.size for p in self.entries.values() if p.trainable)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.data.copy() for k, p in self.entries.items()}

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.tensor.grad = None


@dataclass
class Model:
    cfg: ArchConfig
    tree: ParamTree
    dtype: type = np.float32


def _attention_paths(stack: str, i: int, block: str) -> list[tuple[str, str]]:
    base = f"{stack}.block.{i}.{block}"
    return [(f"{base}.{p}", _PROJ_KIND[p]) for p in ("q", "k", "v", "o")]


def _ff_paths(stack: str, i: int, cfg: ArchConfig) -> list[tuple[str, str, tuple[int, int]]]:
    base = f"{stack}.block.{i}.DenseReluDense"
    if cfg.ff_variant == "gated":
        ins = [(f"{base}.wi_0", "ff-in"), (f"{base}.wi_1", "ff-in-gate")]
    else:
        ins = [(f"{base}.wi", "ff-in")]
    return [(p, k, (cfg.d_model, cfg.d_ff)) for p, k in ins] + [(f"{base}.wo", "ff-out", (cfg.d_ff, cfg.d_model))]


def layer_blocks(stack: str) -> tuple[str, ...]:
    return ("SelfAttention",) if stack == "encoder" else ("SelfAttention", "EncDecAttention")


def base_layout(cfg: ArchConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every base parameter as ``(path, shape, kind)`` in construction order."""
    cfg.validate()
    d, inner = cfg.d_model, cfg.inner_dim
    out: list[tuple[str, tuple[int, ...], str]] = [("shared", (cfg.vocab_size, d), "embedding")]
    for stack, n_layers in (("encoder", cfg.n_encoder_layers), ("decoder", cfg.n_decoder_layers)):
        for i in range(n_layers):
            for block in layer_blocks(stack):
                for path, kind in _attention_paths(stack, i, block):
                    shape = (inner, d) if path.endswith(".o") else (d, inner)
                    out.append((path, shape, kind))
                if i == 0 and block == "SelfAttention" and cfg.rel_pos_buckets > 0:
                    out.append(
                        (f"{stack}.block.0.SelfAttention.relative_attention_bias", (cfg.rel_pos_buckets, cfg.n_heads), "rel-pos-bias")
                    )
                out.append((f"{stack}.block.{i}.{block}.norm", (d,), "norm"))
            for path, kind, shape in _ff_paths(stack, i, cfg):
                out.append((path, shape, kind))
            out.append((f"{stack}.block.{i}.DenseReluDense.norm", (d,), "norm"))
        if n_layers:
            out.append((f"{stack}.final_layer_norm", (d,), "norm"))
    out.append(("lm_head", (d, cfg.vocab_size), "embedding"))
    return out


def build_model(cfg: ArchConfig, seed: int = 0, init: str = "normal", dtype=None, std: float = 0.02) -> tuple[Model, ParamTree]:
    """Instantiate a model; weights ~ N(0, std) from a seeded generator, norms = 1.

    ``init="zeros"`` gives an all-zero model (uniform logits), used in tests.
    """
    if init not in ("normal", "zeros"):
        raise ConfigError(f"unknown init {init!r}")
    dtype = np.dtype(dtype or ad.get_default_dtype()).type
    rng = np.random.default_rng(seed)
    tree = ParamTree()
    for path, shape, kind in base_layout(cfg):
        if init == "zeros":
            data = np.zeros(shape)
        elif kind == "norm":
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        tree.add(path, Tensor(data, dtype=dtype), kind, trainable=True)
    return Model(cfg, tree, dtype), tree


# --------------------------------------------------------------------------
# forward pass


def relative_position_bucket(rel: np.ndarray, bidirectional: bool, num_buckets: int, max_distance: int) -> np.ndarray:
    """T5 bucketing of ``memory_pos - query_pos`` offsets."""
    ret = np.zeros_like(rel)
    n = -rel
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0).astype(rel.dtype) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = num_buckets // 2
    if max_exact < 1:
        return ret
    large = max_exact + (
        np.log(np.maximum(n, 1) / max_exact) / math.log(max(max_distance, max_exact + 1) / max_exact) * (num_buckets - max_exact)
    ).astype(rel.dtype)
    large = np.minimum(large, num_buckets - 1)
    return ret + np.where(n < max_exact, n, large)


def _position_bias(model: Model, stack: str, q_len: int, k_len: int, batch: int):
    table = model.tree.get(f"{stack}.block.0.SelfAttention.relative_attention_bias")
    if table is None:
        return None
    ctx = np.arange(q_len)[:, None]
    mem = np.arange(k_len)[None, :]
    buckets = relative_position_bucket(
        mem - ctx, stack == "encoder", model.cfg.rel_pos_buckets, model.cfg.rel_pos_max_distance
    )
    bias = ad.embedding(table, buckets)  # [q, k, H]
    bias = ad.transpose(bias, (2, 0, 1))
    return ad.expand(bias, (batch,))


def linear(tree: ParamTree, path: str, x: Tensor) -> Tensor:
    """Projection through ``path`` plus whatever adapters are attached to it."""
    y = ad.matmul(x, tree.entries[path].tensor)
    a = tree.entries.get(path + ".lora_A")
    if a is not None:
        b = tree.entries[path + ".lora_B"].tensor
        y = ad.add(y, ad.matmul(ad.matmul(x, ad.transpose(a.tensor, (1, 0))), ad.transpose(b, (1, 0))))
    bias = tree.entries.get(path + ".bias")
    if bias is not None:
        y = ad.add_vector(y, bias.tensor)
    l = tree.entries.get(path + ".ia3")
    if l is not None:
        y = ad.scale_by_vector(y, l.tensor)
    return y


def _split_heads(x: Tensor, batch: int, length: int, cfg: ArchConfig) -> Tensor:
    return ad.transpose(ad.reshape(x, (batch, length, cfg.n_heads, cfg.d_kv)), (0, 2, 1, 3))


def attention(model: Model, base: str, x: Tensor, kv: Tensor, mask: np.ndarray, bias) -> Tensor:
    cfg, tree = model.cfg, model.tree
    batch, q_len, _ = x.shape
    k_len = kv.shape[1]
    q = _split_heads(linear(tree, base + ".q", x), batch, q_len, cfg)
    k = _split_heads(linear(tree, base + ".k", kv), batch, k_len, cfg)
    v = _split_heads(linear(tree, base + ".v", kv), batch, k_len, cfg)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.d_kv))
    if bias is not None:
        scores = ad.add(scores, bias)
    scores = ad.add_const(scores, mask)
    ctx = ad.matmul(ad.softmax(scores), v)  # [B, H, q, d_kv]
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, q_len, cfg.inner_dim))
    return linear(tree, base + ".o", ctx)


def feed_forward(model: Model, base: str, x: Tensor) -> Tensor:
    tree = model.tree
    if model.cfg.ff_variant == "gated":
        h = ad.mul(ad.gelu(linear(tree, base + ".wi_0", x)), linear(tree, base + ".wi_1", x))
    else:
        h = ad.relu(linear(tree, base + ".wi", x))
    l = tree.entries.get(base + ".ia3_ff")
    if l is not None:
        h = ad.scale_by_vector(h, l.tensor)
    return linear(tree, base + ".wo", h)


def _mask_value(dtype) -> float:
    return -1e9 if np.dtype(dtype) == np.float64 else -1e4


def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"token array must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def _check_ids(model: Model, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= model.cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {model.cfg.vocab_size})")


def encode(model: Model, encoder_tokens, encoder_mask=None, prompt: Tensor | None = None):
    """Run the encoder stack; returns (hidden [B, T, d], key mask [B, T])."""
    cfg, tree = model.cfg, model.tree
    ids = _as_batch(encoder_tokens)
    _check_ids(model, ids)
    batch = ids.shape[0]
    valid = np.ones(ids.shape, dtype=bool) if encoder_mask is None else _as_batch(encoder_mask).astype(bool)
    h = ad.embedding(tree.entries["shared"].tensor, ids)
    if prompt is None and "prompt" in tree:
        prompt = tree.entries["prompt"].tensor
    if prompt is not None:
        if prompt.data.ndim != 2 or prompt.shape[1] != cfg.d_model:
            raise ad.ShapeError(f"prompt must be [n, {cfg.d_model}], got {prompt.shape}")
        if prompt.shape[0] > 0:
            h = ad.concat([ad.expand(prompt, (batch,)), h], axis=1)
            valid = np.concatenate([np.ones((batch, prompt.shape[0]), dtype=bool), valid], axis=1)
    length = h.shape[1]
    neg = _mask_value(h.dtype)
    mask = np.where(valid, 0.0, neg)[:, None, None, :].astype(h.dtype)
    bias = _position_bias(model, "encoder", length, length, batch)
    for i in range(cfg.n_encoder_layers):
        base = f"encoder.block.{i}"
        x = ad.rmsnorm(h, tree.entries[base + ".SelfAttention.norm"].tensor)
        h = ad.add(h, attention(model, base + ".SelfAttention", x, x, mask, bias))
        x = ad.rmsnorm(h, tree.entries[base + ".DenseReluDense.norm"].tensor)
        h = ad.add(h, feed_forward(model, base + ".DenseReluDense", x))
    if cfg.n_encoder_layers:
        h = ad.rmsnorm(h, tree.entries["encoder.final_layer_norm"].tensor)
    return h, valid


def decode(model: Model, decoder_tokens, enc_hidden: Tensor, enc_valid: np.ndarray) -> Tensor:
    cfg, tree = model.cfg, model.tree
    ids = _as_batch(decoder_tokens)
    _check_ids(model, ids)
    batch, length = ids.shape
    h = ad.embedding(tree.entries["shared"].tensor, ids)
    neg = _mask_value(h.dtype)
    causal = np.triu(np.full((length, length), neg), k=1)[None, None].astype(h.dtype)
    cross = np.where(enc_valid, 0.0, neg)[:, None, None, :].astype(h.dtype)
    bias = _position_bias(model, "decoder", length, length, batch)
    for i in range(cfg.n_decoder_layers):
        base = f"decoder.block.{i}"
        x = ad.rmsnorm(h, tree.entries[base + ".SelfAttention.norm"].tensor)
        h = ad.add(h, attention(model, base + ".SelfAttention", x, x, causal, bias))
        x = ad.rmsnorm(h, tree.entries[base + ".EncDecAttention.norm"].tensor)
        h = ad.add(h, attention(model, base + ".EncDecAttention", x, enc_hidden, cross, None))
        x = ad.rmsnorm(h, tree.entries[base + ".DenseReluDense.norm"].tensor)
        h = ad.add(h, feed_forward(model, base + ".DenseReluDense", x))
    if cfg.n_decoder_layers:
        h = ad.rmsnorm(h, tree.entries["decoder.final_layer_norm"].tensor)
    return ad.matmul(h, tree.entries["lm_head"].tensor)


def forward(model: Model, encoder_tokens, decoder_tokens, encoder_mask=None) -> Tensor:
    """Logits ``[dec_len, vocab]`` for 1-D inputs, ``[B, dec_len, vocab]`` for batches.

    If the tree carries a trained soft prompt (``prompt`` path) it is
    prepended automatically.
    """
    single = np.asarray(decoder_tokens).ndim == 1
    enc_hidden, valid = encode(model, encoder_tokens, encoder_mask)
    logits = decode(model, decoder_tokens, enc_hidden, valid)
    return ad.reshape(logits, logits.shape[1:]) if single else logits


def forward_with_prompt(model: Model, prompt: Tensor, encoder_tokens, decoder_tokens, encoder_mask=None) -> Tensor:
    """Like :func:`forward` with ``prompt`` rows prepended to the encoder embeddings."""
    single = np.asarray(decoder_tokens).ndim == 1
    enc_hidden, valid = encode(model, encoder_tokens, encoder_mask, prompt=prompt)
    logits = decode(model, decoder_tokens, enc_hidden, valid)
    return ad.reshape(logits, logits.shape[1:]) if single else logits


def shift_right(targets) -> np.ndarray:
    """Decoder inputs for teacher forcing: PAD as start token, drop the last target."""
    t = _as_batch(targets)
    out = np.full_like(t, PAD_ID)
    out[:, 1:] = t[:, :-1]
    return out


# --------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"PEFTBENCH-TENSORS\n"


def write_tensors(path, header: dict, tensors: dict[str, tuple[np.ndarray, str, bool]]) -> None:
    """Write ``{path: (array, kind, trainable)}`` plus a JSON header.

    Layout: magic line, one JSON header line (listing every entry with
    shape, dtype, byte offset), then little-endian raw values.
    """
    entries = []
    blobs = []
    offset = 0
    for name, (arr, kind, trainable) in tensors.items():
        le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"path": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "kind": kind, "trainable": trainable, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    head = dict(header)
    head["entries"] = entries
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def read_tensors(path) -> tuple[dict, dict[str, tuple[np.ndarray, str, bool]]]:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path}: not a peftbench tensor file")
        header = json.loads(fh.readline())
        payload = fh.read()
    out = {}
    for e in header.pop("entries"):
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).astype(e["dtype"]).reshape(e["shape"])
        out[e["path"]] = (arr.copy(), e["kind"], bool(e["trainable"]))
    return header, out


def save_model(model: Model, path) -> None:
    tensors = {
        k: (p.tensor.data, p.kind, p.trainable) for k, p in model.tree.items() if p.kind in BASE_KINDS
    }
    write_tensors(path, {"format": "model", "arch": model.cfg.to_dict(), "precision": np.dtype(model.dtype).name}, tensors)


def load_model(path) -> Model:
    header, tensors = read_tensors(path)
    if header.get("format") != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = ArchConfig.from_dict(header["arch"])
    dtype = np.dtype(header["precision"]).type
    tree = ParamTree()
    for name, (arr, kind, trainable) in tensors.items():
        tree.add(name, Tensor(arr, dtype=dtype), kind, trainable)
    expected = [p for p, _, _ in base_layout(cfg)]
    if sorted(expected) != sorted(tree.entries):
        raise ValueError(f"{path}: parameter paths do not match the recorded ArchConfig")
    return Model(cfg, tree, dtype)


def load_config(path: str | Path) -> dict:
    """Read a JSON config file."""
    with open(path) as fh:
        return json.load(fh)
