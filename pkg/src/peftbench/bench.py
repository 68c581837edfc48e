"""Grid orchestration at desk scale.

A grid is the product tasks x tiers x methods, plus optional ablation
cells (a label with a full PEFT config). Every cell rebuilds its corpus and
loads the base model from a checkpoint, so cells share nothing and can run
in separate processes. ``PEFTBENCH_WORKERS`` sets the pool size.
"""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .adapters import apply_peft
from .harness import LR_PRESETS, LrTriple, RunRecord, fingerprint, train
from .model import ArchConfig, Model, build_model, load_model, save_model
from .selection import PeftConfig
from .tasks import TaskSpec, TierSpec, Tokenizer, generate_task, get_tier, tier_split

WORKERS_ENV = "PEFTBENCH_WORKERS"
METRICS = {"classification": "accuracy", "generation": "rouge-l"}

BENCH_ARCH = ArchConfig(
    vocab_size=len(Tokenizer()),
    d_model=64,
    n_heads=4,
    d_kv=16,
    d_ff=128,
    n_encoder_layers=2,
    n_decoder_layers=2,
    rel_pos_buckets=16,
    rel_pos_max_distance=32,
)


@dataclass(frozen=True)
class PretrainConfig:
    """Instructed multi-variant mixture used to give the base model something to adapt."""

    per_variant: int = 600
    epochs: int = 6
    batch: int = 32
    lr: tuple[float, float, float] = (1e-3, 3e-3, 3e-4)
    data_seed: int = 100
    seed: int = 0


def pretrain_base(arch: ArchConfig = BENCH_ARCH, cfg: PretrainConfig = PretrainConfig()) -> tuple[Model, RunRecord]:
    tok = Tokenizer()
    mix = []
    for kind in ("classification", "generation"):
        for v in range(4):
            mix += generate_task(TaskSpec(kind=kind, variant=v, instruction=True, size=cfg.per_variant, seed=cfg.data_seed + v))
    tier = TierSpec("pretrain", len(mix) - 400, cfg.epochs, 200)
    split = tier_split(mix, tier, seed=cfg.seed + 1)
    model, _ = build_model(arch, seed=cfg.seed)
    rec = train(model, None, split, tok, tier, LrTriple(*cfg.lr), metric="rouge-l", batch=cfg.batch, grad_accum=1, seed=cfg.seed)
    return model, rec


@dataclass(frozen=True)
class Cell:
    task: str
    tier: str
    method: str
    peft: dict
    ablation: str = ""

    def config(self, grid: "GridConfig") -> dict:
        return {
            "task": self.task,
            "tier": self.tier,
            "method": self.method,
            "ablation": self.ablation,
            "peft": self.peft,
            "seed": grid.seed,
            "data_seed": grid.data_seed,
            "split_seed": grid.split_seed,
            "corpus_size": grid.corpus_size,
            "eval_cap": grid.eval_cap,
            "batch": grid.batch,
            "grad_accum": grid.grad_accum,
            "base": grid.base,
            "arch": dataclasses.asdict(grid.arch),
        }


@dataclass
class GridConfig:
    tasks: list[str] = field(default_factory=lambda: ["classification", "generation"])
    tiers: list[str] = field(default_factory=lambda: ["medium"])
    methods: list[str] = field(default_factory=lambda: ["full", "lora", "ia3", "bitfit", "prompt"])
    # each entry: {"label": str, "tier": str (optional), "peft": {...PeftConfig fields}}
    ablations: list[dict] = field(default_factory=list)
    seed: int = 0
    data_seed: int = 7
    split_seed: int = 3
    corpus_size: int = 1400
    eval_cap: int = 200
    batch: int = 16
    grad_accum: int = 1
    lora_rank: int = 2
    prompt_len: int = 4
    # "pretrained" (build once, cached), "scratch", or a model checkpoint path
    base: str = "pretrained"
    arch: ArchConfig = BENCH_ARCH
    pretrain: PretrainConfig = PretrainConfig()

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        d = dict(d)
        if "arch" in d:
            d["arch"] = ArchConfig.from_dict(d["arch"])
        if "pretrain" in d:
            p = dict(d["pretrain"])
            if "lr" in p:
                p["lr"] = tuple(p["lr"])
            d["pretrain"] = PretrainConfig(**p)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown grid fields: {sorted(unknown)}")
        return cls(**d)

    def method_peft(self, method: str) -> dict:
        return {"method": method, "lora_rank": self.lora_rank, "prompt_len": self.prompt_len}

    def cells(self) -> list[Cell]:
        out = []
        for task in self.tasks:
            if task not in METRICS:
                raise ValueError(f"unknown task {task!r}")
            for tier in self.tiers:
                get_tier(tier)
                for m in self.methods:
                    out.append(Cell(task, tier, m, self.method_peft(m)))
            for ab in self.ablations:
                peft = {**self.method_peft(ab.get("peft", {}).get("method", "lora")), **ab.get("peft", {})}
                out.append(Cell(task, ab.get("tier", self.tiers[0]), peft["method"], peft, ab["label"]))
        return out


def _failed(cell: Cell, fp: str, err: str) -> RunRecord:
    return RunRecord(fp, 0, 0, 0.0, 0, METRICS[cell.task], [], 0.0, cell.method, cell.tier, cell.task, cell.ablation, err)


def train_cell(cell: Cell, grid: GridConfig, base_path: str | None, examples=None):
    """Train one cell and return ``(record, model, adapters)``; errors propagate."""
    tok = Tokenizer()
    data = examples if examples is not None else generate_task(TaskSpec(kind=cell.task, size=grid.corpus_size, seed=grid.data_seed))
    tier = get_tier(cell.tier, eval_cap=grid.eval_cap)
    split = tier_split(data, tier, seed=grid.split_seed)
    model = load_model(base_path) if base_path else build_model(grid.arch, seed=grid.seed)[0]
    peft = PeftConfig.from_dict(cell.peft)
    adapters = apply_peft(model, peft, seed=grid.seed)
    rec = train(
        model,
        adapters,
        split,
        tok,
        tier,
        LR_PRESETS[peft.method],
        metric=METRICS[cell.task],
        batch=grid.batch,
        grad_accum=grid.grad_accum,
        seed=grid.seed,
    )
    rec = dataclasses.replace(rec, fingerprint=fingerprint(cell.config(grid)), task=cell.task, ablation=cell.ablation, method=peft.method)
    return rec, model, adapters


def run_cell(cell: Cell, grid: GridConfig, base_path: str | None) -> RunRecord:
    """Train and evaluate one cell; any exception becomes an error record."""
    try:
        return train_cell(cell, grid, base_path)[0]
    except Exception as exc:  # isolate the cell, keep the grid going
        return _failed(cell, fingerprint(cell.config(grid)), f"{type(exc).__name__}: {exc}")


def _run_cell_star(args):
    return run_cell(*args)


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


def prepare_base(grid: GridConfig, cache_dir: str | Path) -> str | None:
    """Resolve ``grid.base`` to a checkpoint path (None means fresh random init)."""
    if grid.base == "scratch":
        return None
    if grid.base != "pretrained":
        if not Path(grid.base).exists():
            raise FileNotFoundError(grid.base)
        return grid.base
    key = fingerprint({"arch": dataclasses.asdict(grid.arch), "pretrain": dataclasses.asdict(grid.pretrain)})
    path = Path(cache_dir) / f"base-{key}.ckpt"
    if not path.exists():
        model, _ = pretrain_base(grid.arch, grid.pretrain)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save_model(model, tmp)
        tmp.replace(path)
    return str(path)


def run_matrix(grid: GridConfig, out_dir: str | Path | None = None, workers: int | None = None, cache_dir: str | Path | None = None) -> list[RunRecord]:
    """Run every cell; returns records sorted by fingerprint and writes ``results.jsonl``."""
    cells = grid.cells()
    workers = worker_count() if workers is None else workers
    cache = Path(cache_dir or out_dir or tempfile.gettempdir())
    base_path = prepare_base(grid, cache)
    jobs = [(c, grid, base_path) for c in cells]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_cell_star, jobs))
    else:
        records = [_run_cell_star(j) for j in jobs]
    records.sort(key=lambda r: r.fingerprint)
    if out_dir is not None:
        write_results(records, Path(out_dir) / "results.jsonl")
    return records


def write_results(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_results(path) -> list[RunRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(RunRecord.from_dict(json.loads(line)))
    return out
