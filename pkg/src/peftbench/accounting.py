"""Closed-form parameter accounting; nothing here allocates weights."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .model import XL, ArchConfig
from .selection import (
    IA3_PAPER_TEXT,
    IA3_TABLE_CONSISTENT,
    TABLE4_LORA_RANK,
    EmptySelectionError,
    LayerSelection,
    PeftConfig,
    host_sites,
)

XL_TOTAL = 2_849_757_184


@dataclass
class CountReport:
    total_params: int
    trainable_params: int
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def fraction(self) -> float:
        return self.trainable_params / self.total_params

    def rows(self) -> list[tuple[str, int]]:
        return sorted(self.breakdown.items())


def _attention_block(arch: ArchConfig) -> int:
    return 4 * arch.d_model * arch.inner_dim


def _ff_block(arch: ArchConfig) -> int:
    n_in = 2 if arch.ff_variant == "gated" else 1
    return n_in * arch.d_model * arch.d_ff + arch.d_ff * arch.d_model


def count_total(arch: ArchConfig) -> int:
    """Exact base parameter count of the encoder-decoder described by ``arch``."""
    arch.validate()
    d = arch.d_model
    total = 2 * arch.vocab_size * d  # shared input embedding + untied head
    enc_layer = _attention_block(arch) + _ff_block(arch) + 2 * d
    dec_layer = 2 * _attention_block(arch) + _ff_block(arch) + 3 * d
    total += arch.n_encoder_layers * enc_layer + arch.n_decoder_layers * dec_layer
    for n in (arch.n_encoder_layers, arch.n_decoder_layers):
        if n:
            total += arch.rel_pos_buckets * arch.n_heads + d  # position table on block 0, final norm
    return total


def _proj_table(arch: ArchConfig) -> dict[str, tuple[int, int]]:
    """(d_in, d_out) of each projection, keyed by its site letter."""
    d, inner, ff = arch.d_model, arch.inner_dim, arch.d_ff
    return {
        "q": (d, inner),
        "k": (d, inner),
        "v": (d, inner),
        "o": (inner, d),
        "wi": (d, ff),
        "wi_0": (d, ff),
        "wi_1": (d, ff),
        "wo": (ff, d),
    }


def _pattern(host: str) -> str:
    parts = host.split(".")
    if len(parts) > 2 and parts[1] == "block":
        parts[2] = "*"
    return ".".join(parts)


def count_trainable(arch: ArchConfig, cfg: PeftConfig) -> CountReport:
    """Trainable-parameter count of ``cfg`` applied to ``arch``.

    Adapter sites are enumerated for one template layer per stack and
    multiplied by the number of selected layers in that stack.
    Raises :class:`~peftbench.selection.EmptySelectionError` when the
    selection leaves nothing to train.
    """
    total = count_total(arch)
    cfg.validate()
    if cfg.method == "full":
        return CountReport(total, total, {"*": total})
    if cfg.method == "prompt":
        n = cfg.prompt_len * arch.d_model
        return CountReport(total, n, {"prompt": n})
    dims = _proj_table(arch)
    selected = {k: len(v) for k, v in cfg.layer_selection.layers(arch.n_encoder_layers, arch.n_decoder_layers).items()}
    template = dataclasses.replace(arch, n_encoder_layers=min(arch.n_encoder_layers, 1), n_decoder_layers=min(arch.n_decoder_layers, 1))
    try:
        sites = host_sites(template, dataclasses.replace(cfg, layer_selection=LayerSelection("all")))
    except EmptySelectionError:
        sites = []
    breakdown: dict[str, int] = {}
    for host, site in sites:
        mult = selected[host.split(".", 1)[0]]
        if not mult:
            continue
        if cfg.method == "lora":
            d_in, d_out = dims[site]
            key, n = _pattern(host) + ".lora", cfg.lora_rank * (d_in + d_out)
        elif cfg.method == "bitfit":
            key, n = _pattern(host) + ".bias", dims[site][1]
        elif site == "ff-intermediate":
            key, n = _pattern(host) + ".ia3_ff", arch.d_ff
        elif site == "ff-out":
            key, n = _pattern(host) + ".ia3", arch.d_model
        else:
            key, n = _pattern(host) + ".ia3", dims[site][1]
        breakdown[key] = breakdown.get(key, 0) + n * mult
    if not breakdown:
        host_sites(arch, cfg)  # raises with the full diagnostic
        raise EmptySelectionError(f"{cfg.method!r} selects no trainable parameters")
    return CountReport(total, sum(breakdown.values()), breakdown)


def table4_rows(arch: ArchConfig = XL) -> list[tuple[str, PeftConfig | None, int]]:
    """The ablation parameter-count table as ``(label, config, published count)``.

    LoRA rows use the table-consistent sizing (rank 3 on q, k, v, o of every
    attention block); (IA)^3 rows use the table-consistent site set.
    """
    ia3 = PeftConfig(method="ia3", ia3_targets=IA3_TABLE_CONSISTENT)
    lora = PeftConfig(method="lora", lora_rank=TABLE4_LORA_RANK)

    def sel(base: PeftConfig, policy: str) -> PeftConfig:
        return _replace(base, layer_selection=LayerSelection(policy, seed=0))

    def drop(base: PeftConfig, name: str) -> PeftConfig:
        return _replace(base, submodule_drops=frozenset({name}))

    return [
        ("Total Parameters (no PEFT)", None, 2_849_757_184),
        ("(IA)3 (full layers/modules)", ia3, 933_888),
        ("LoRA (full layers/modules)", lora, 3_538_944),
        ("(IA)3 (select early layers)", sel(ia3, "early-half"), 466_944),
        ("LoRA (select early layers)", sel(lora, "early-half"), 1_769_472),
        ("(IA)3 (select later layers)", sel(ia3, "later-half"), 466_944),
        ("LoRA (select later layers)", sel(lora, "later-half"), 1_769_472),
        ("(IA)3 (select random layers)", sel(ia3, "random-half"), 466_944),
        ("LoRA (select random layers)", sel(lora, "random-half"), 1_769_472),
        ("LoRA (drop self-attention)", drop(lora, "drop-self-attention"), 1_179_648),
        ("LoRA (drop enc/dec-attention)", drop(lora, "drop-encdec-attention"), 2_359_296),
        ("LoRA (drop query/output attention)", drop(lora, "drop-query-output"), 1_769_472),
        ("(IA)3 (drop attention)", drop(ia3, "drop-attention-all"), 344_064),
        ("(IA)3 (drop dense activation)", drop(ia3, "drop-dense-activation"), 589_824),
    ]


def method_baselines() -> list[tuple[str, PeftConfig, int]]:
    """Per-method trainable counts on the XL preset."""
    return [
        ("(IA)3", PeftConfig(method="ia3"), 933_888),
        ("LoRA", PeftConfig(method="lora", lora_rank=TABLE4_LORA_RANK), 3_538_944),
        ("Prompt tuning", PeftConfig(method="prompt", prompt_len=100), 204_800),
        ("BitFit", PeftConfig(method="bitfit"), 1_179_648),
    ]


def _replace(cfg: PeftConfig, **kw) -> PeftConfig:
    return dataclasses.replace(cfg, **kw)


__all__ = [
    "CountReport",
    "IA3_PAPER_TEXT",
    "XL_TOTAL",
    "count_total",
    "count_trainable",
    "method_baselines",
    "table4_rows",
]
