"""LoRA, (IA)^3, BitFit and prompt tuning as mutations of a :class:`ParamTree`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .model import ADAPTER_KINDS, BASE_KINDS, Model, read_tensors, write_tensors
from .selection import PeftConfig, host_sites

PROMPT_INIT_STD = 0.5


class AdapterError(RuntimeError):
    pass


@dataclass
class AdapterRecord:
    host: str
    kind: str  # lora | ia3 | bitfit | prompt
    paths: tuple[str, ...]


@dataclass
class AdapterSet:
    cfg: PeftConfig
    records: list[AdapterRecord] = field(default_factory=list)
    consumed: bool = False

    def paths(self) -> list[str]:
        return [p for r in self.records for p in r.paths]

    def __len__(self) -> int:
        return len(self.records)


def _adapter_path(host: str, site: str, method: str) -> str:
    if method == "ia3":
        return host + (".ia3_ff" if site == "ff-intermediate" else ".ia3")
    if method == "bitfit":
        return host + ".bias"
    raise AssertionError(method)


def apply_peft(model: Model, cfg: PeftConfig, seed: int = 0) -> AdapterSet:
    """Freeze the base model and attach the adapters ``cfg`` asks for.

    Every adapter starts at the identity: LoRA ``B = 0``, (IA)^3 ``l = 1``,
    BitFit ``b = 0``. The soft prompt is drawn from N(0, 0.5).
    """
    tree, dtype = model.tree, model.dtype
    if any(p.kind in ADAPTER_KINDS for p in tree.entries.values()):
        raise AdapterError("model already carries adapters")
    pairs = host_sites(model.cfg, cfg)
    adapters = AdapterSet(cfg)
    if cfg.method == "full":
        for path, p in tree.items():
            tree.set_trainable(path, True)
        return adapters
    for path in list(tree):
        tree.set_trainable(path, False)
    rng = np.random.default_rng(seed)
    if cfg.method == "prompt":
        data = rng.normal(0.0, PROMPT_INIT_STD, size=(cfg.prompt_len, model.cfg.d_model))
        tree.add("prompt", Tensor(data, dtype=dtype), "prompt", trainable=True)
        adapters.records.append(AdapterRecord("prompt", "prompt", ("prompt",)))
        return adapters
    for host, site in pairs:
        if cfg.method == "lora":
            d_in, d_out = tree[host].tensor.shape
            a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(cfg.lora_rank, d_in))
            tree.add(host + ".lora_A", Tensor(a, dtype=dtype), "adapter")
            tree.add(host + ".lora_B", Tensor(np.zeros((d_out, cfg.lora_rank)), dtype=dtype), "adapter")
            adapters.records.append(AdapterRecord(host, "lora", (host + ".lora_A", host + ".lora_B")))
        elif cfg.method == "ia3":
            path = _adapter_path(host, site, "ia3")
            if site == "ff-intermediate":
                width = model.cfg.d_ff
            else:
                width = tree[host].tensor.shape[1]
            tree.add(path, Tensor(np.ones(width), dtype=dtype), "adapter")
            adapters.records.append(AdapterRecord(host, "ia3", (path,)))
        else:
            path = _adapter_path(host, site, "bitfit")
            tree.add(path, Tensor(np.zeros(tree[host].tensor.shape[1]), dtype=dtype), "bias-injected")
            adapters.records.append(AdapterRecord(host, "bitfit", (path,)))
    return adapters


def trainable_parameters(model: Model, adapters: AdapterSet | None = None) -> list[tuple[str, Tensor]]:
    """Trainable tensors sorted by path."""
    return [(k, p.tensor) for k, p in sorted(model.tree.items()) if p.trainable]


def remove_adapters(model: Model) -> None:
    """Drop every adapter tensor and make the base trainable again."""
    tree = model.tree
    for path in [k for k, p in tree.items() if p.kind in ADAPTER_KINDS]:
        tree.remove(path)
    for path in tree:
        tree.set_trainable(path, True)


def merge_lora(model: Model, adapters: AdapterSet) -> Model:
    """Fold ``W <- W + (BA)^T`` (weights are stored ``[d_in, d_out]``) and remove the factors."""
    if adapters.cfg.method != "lora":
        raise AdapterError(f"merge_lora needs a LoRA adapter set, got {adapters.cfg.method!r}")
    if adapters.consumed:
        raise AdapterError("adapters already merged")
    tree = model.tree
    for rec in adapters.records:
        a = tree.remove(rec.host + ".lora_A").tensor.data
        b = tree.remove(rec.host + ".lora_B").tensor.data
        w = tree[rec.host].tensor
        w.data = (w.data + (b @ a).T).astype(w.data.dtype)
    adapters.consumed = True
    return model


def fold_ia3(model: Model, adapters: AdapterSet) -> Model:
    """Multiply (IA)^3 vectors into the weights they scale; no extra inference parameters remain."""
    if adapters.cfg.method != "ia3":
        raise AdapterError(f"fold_ia3 needs an (IA)^3 adapter set, got {adapters.cfg.method!r}")
    if adapters.consumed:
        raise AdapterError("adapters already folded")
    tree = model.tree
    for rec in adapters.records:
        (path,) = rec.paths
        l = tree.remove(path).tensor.data
        if path.endswith(".ia3_ff"):
            # (h * l) @ Wo == h @ (diag(l) Wo)
            wo = tree[rec.host + ".wo"].tensor
            wo.data = (wo.data * l[:, None]).astype(wo.data.dtype)
        else:
            w = tree[rec.host].tensor
            w.data = (w.data * l[None, :]).astype(w.data.dtype)
    adapters.consumed = True
    return model


def save_adapters(model: Model, adapters: AdapterSet, path) -> None:
    tensors = {
        k: (p.tensor.data, p.kind, p.trainable) for k, p in model.tree.items() if p.kind in ADAPTER_KINDS
    }
    header = {
        "format": "adapters",
        "arch": model.cfg.to_dict(),
        "peft": adapters.cfg.to_dict(),
        "precision": np.dtype(model.dtype).name,
        "records": [[r.host, r.kind, list(r.paths)] for r in adapters.records],
    }
    write_tensors(path, header, tensors)


def load_adapters(model: Model, path) -> AdapterSet:
    """Attach adapters saved by :func:`save_adapters` to a matching base model."""
    header, tensors = read_tensors(path)
    if header.get("format") != "adapters":
        raise ValueError(f"{path}: not an adapter checkpoint")
    if header["arch"] != model.cfg.to_dict():
        raise ValueError(f"{path}: adapters were trained for a different ArchConfig")
    cfg = PeftConfig.from_dict(header["peft"])
    tree = model.tree
    if any(p.kind in ADAPTER_KINDS for p in tree.entries.values()):
        raise AdapterError("model already carries adapters")
    full = cfg.method == "full"
    for k, p in tree.items():
        if p.kind in BASE_KINDS:
            tree.set_trainable(k, full)
    for name, (arr, kind, trainable) in tensors.items():
        tree.add(name, Tensor(arr, dtype=arr.dtype), kind, trainable)
    records = [AdapterRecord(h, k, tuple(ps)) for h, k, ps in header["records"]]
    return AdapterSet(cfg, records)
