"""Layer-selection and submodule-drop ablations, plus host enumeration.

A *host* is the place an adapter attaches to:

* a linear projection path (``decoder.block.3.EncDecAttention.k``), used
  by LoRA, BitFit and the projection-output (IA)^3 sites;
* ``<stack>.block.<i>.DenseReluDense`` for the (IA)^3 scaling of the
  feed-forward intermediate activation;
* ``prompt`` for prompt tuning.

Random-half selection uses :class:`Lcg64`, a fully specified generator so
that host sets can be reproduced outside Python:

    state <- (state * 6364136223846793005 + 1442695040888963407) mod 2**64
    output = state >> 33                      (31 usable bits)

seeded with ``state = seed mod 2**64`` and advanced once before the first
output. Per stack (encoder first, then decoder) ``floor(L/2)`` distinct layer
indices are drawn with a partial Fisher-Yates shuffle of ``[0, L)``: for
``i = 0 .. k-1`` swap position ``i`` with ``i + output mod (L - i)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .model import ArchConfig, ConfigError, layer_blocks

POLICIES = ("all", "early-half", "later-half", "random-half")
DROPS = (
    "drop-self-attention",
    "drop-encdec-attention",
    "drop-query-output",
    "drop-attention-all",
    "drop-dense-activation",
)
METHODS = ("full", "lora", "ia3", "bitfit", "prompt")

IA3_SITES = ("q-out", "k-out", "v-out", "o-out", "ff-intermediate", "ff-out")
IA3_TABLE_CONSISTENT = frozenset(IA3_SITES)
IA3_PAPER_TEXT = frozenset({"k-out", "v-out", "ff-intermediate"})
IA3_PRESETS = {"table-consistent": IA3_TABLE_CONSISTENT, "paper-text": IA3_PAPER_TEXT}

# Table-4-consistent LoRA sizing: four adapted projections per attention
# block at rank 3 (see ``accounting``).
TABLE4_LORA_RANK = 3


class EmptySelectionError(ConfigError):
    """The configuration selects no trainable parameters."""


class Lcg64:
    MUL = 6364136223846793005
    INC = 1442695040888963407
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = int(seed) & self.MASK

    def next(self) -> int:
        self.state = (self.state * self.MUL + self.INC) & self.MASK
        return self.state >> 33

    def below(self, n: int) -> int:
        return self.next() % n


def sample_distinct(rng: Lcg64, n: int, k: int) -> list[int]:
    pool = list(range(n))
    for i in range(k):
        j = i + rng.below(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:k])


@dataclass(frozen=True)
class LayerSelection:
    policy: str = "all"
    seed: int = 0

    def validate(self) -> "LayerSelection":
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown layer policy {self.policy!r}; expected one of {POLICIES}")
        return self

    def layers(self, n_encoder: int, n_decoder: int) -> dict[str, list[int]]:
        """Selected block indices per stack."""
        self.validate()
        out: dict[str, list[int]] = {}
        rng = Lcg64(self.seed)
        for stack, n in (("encoder", n_encoder), ("decoder", n_decoder)):
            half = n // 2
            if self.policy == "all":
                out[stack] = list(range(n))
            elif self.policy == "early-half":
                out[stack] = list(range(half))
            elif self.policy == "later-half":
                out[stack] = list(range(n - half, n))
            else:
                out[stack] = sample_distinct(rng, n, half)
        return out


@dataclass(frozen=True)
class PeftConfig:
    method: str = "lora"
    lora_rank: int = 2
    lora_targets: frozenset = frozenset({"q", "k", "v", "o"})
    ia3_targets: frozenset = IA3_TABLE_CONSISTENT
    prompt_len: int = 100
    layer_selection: LayerSelection = field(default_factory=LayerSelection)
    submodule_drops: frozenset = frozenset()

    def validate(self) -> "PeftConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if self.prompt_len < 1:
            raise ConfigError(f"prompt_len must be >= 1, got {self.prompt_len}")
        bad = set(self.lora_targets) - {"q", "k", "v", "o"}
        if bad:
            raise ConfigError(f"unknown lora targets {sorted(bad)}")
        bad = set(self.ia3_targets) - set(IA3_SITES)
        if bad:
            raise ConfigError(f"unknown ia3 sites {sorted(bad)}")
        bad = set(self.submodule_drops) - set(DROPS)
        if bad:
            raise ConfigError(f"unknown submodule drops {sorted(bad)}")
        self.layer_selection.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lora_rank": self.lora_rank,
            "lora_targets": sorted(self.lora_targets),
            "ia3_targets": sorted(self.ia3_targets),
            "prompt_len": self.prompt_len,
            "layer_selection": dataclasses.asdict(self.layer_selection),
            "submodule_drops": sorted(self.submodule_drops),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PeftConfig":
        d = dict(d)
        ia3 = d.get("ia3_targets", "table-consistent")
        if isinstance(ia3, str):
            if ia3 not in IA3_PRESETS:
                raise ConfigError(f"unknown ia3 preset {ia3!r}")
            ia3 = IA3_PRESETS[ia3]
        sel = d.get("layer_selection", {})
        if isinstance(sel, str):
            sel = {"policy": sel}
        drops = d.get("submodule_drops", ())
        if isinstance(drops, str):
            drops = (drops,)
        known = {"method", "lora_rank", "lora_targets", "ia3_targets", "prompt_len", "layer_selection", "submodule_drops"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown PeftConfig fields: {sorted(unknown)}")
        return cls(
            method=d.get("method", "lora"),
            lora_rank=int(d.get("lora_rank", 2)),
            lora_targets=frozenset(d.get("lora_targets", ("q", "k", "v", "o"))),
            ia3_targets=frozenset(ia3),
            prompt_len=int(d.get("prompt_len", 100)),
            layer_selection=LayerSelection(**sel),
            submodule_drops=frozenset(drops),
        ).validate()


def _block_of(host: str) -> str:
    # "<stack>.block.<i>.<Block>.<proj>" -> "<Block>"
    return host.split(".")[3]


def _proj_of(host: str) -> str:
    return host.split(".")[4] if host.count(".") >= 4 else ""


def _apply_drops(hosts: list[tuple[str, str]], drops) -> list[tuple[str, str]]:
    """Filter (host, site) pairs; site is q/k/v/o/ff-intermediate/ff-out/wi..."""
    out = []
    for host, site in hosts:
        block = _block_of(host)
        is_attn = block in ("SelfAttention", "EncDecAttention")
        if "drop-self-attention" in drops and block == "SelfAttention":
            continue
        if "drop-encdec-attention" in drops and block == "EncDecAttention":
            continue
        if "drop-query-output" in drops and is_attn and site in ("q", "o"):
            continue
        if "drop-attention-all" in drops and is_attn:
            continue
        if "drop-dense-activation" in drops and block == "DenseReluDense":
            continue
        out.append((host, site))
    return out


def _ff_projections(cfg: ArchConfig) -> tuple[str, ...]:
    return ("wi_0", "wi_1", "wo") if cfg.ff_variant == "gated" else ("wi", "wo")


def host_sites(arch: ArchConfig, cfg: PeftConfig) -> list[tuple[str, str]]:
    """Ordered ``(host, site)`` pairs that receive adapters.

    ``site`` names the adapted quantity: a projection letter for LoRA and
    BitFit (``q``, ``wi_0``...), or an (IA)^3 site name (``k-out``...).
    Layer selection and drops are applied; ``full`` and ``prompt`` ignore
    both.
    """
    arch.validate()
    cfg.validate()
    if cfg.method == "full":
        return [("*", "all")]
    if cfg.method == "prompt":
        return [("prompt", "prompt")]
    layers = cfg.layer_selection.layers(arch.n_encoder_layers, arch.n_decoder_layers)
    pairs: list[tuple[str, str]] = []
    for stack in ("encoder", "decoder"):
        for i in layers[stack]:
            for block in layer_blocks(stack):
                base = f"{stack}.block.{i}.{block}"
                for proj in ("q", "k", "v", "o"):
                    if cfg.method == "lora" and proj in cfg.lora_targets:
                        pairs.append((f"{base}.{proj}", proj))
                    elif cfg.method == "ia3" and f"{proj}-out" in cfg.ia3_targets:
                        pairs.append((f"{base}.{proj}", proj))
                    elif cfg.method == "bitfit":
                        pairs.append((f"{base}.{proj}", proj))
            ff = f"{stack}.block.{i}.DenseReluDense"
            if cfg.method == "ia3":
                if "ff-intermediate" in cfg.ia3_targets:
                    pairs.append((ff, "ff-intermediate"))
                if "ff-out" in cfg.ia3_targets:
                    pairs.append((f"{ff}.wo", "ff-out"))
            elif cfg.method == "bitfit":
                for proj in _ff_projections(arch):
                    pairs.append((f"{ff}.{proj}", proj))
    pairs = _apply_drops(pairs, cfg.submodule_drops)
    if not pairs:
        raise EmptySelectionError(
            f"method {cfg.method!r} with selection {cfg.layer_selection.policy!r} and drops "
            f"{sorted(cfg.submodule_drops)} leaves no trainable parameters"
        )
    return pairs


def select_hosts(arch: ArchConfig, cfg: PeftConfig) -> set[str]:
    """Set of host paths receiving adapters (see :func:`host_sites`)."""
    return {h for h, _ in host_sites(arch, cfg)}
