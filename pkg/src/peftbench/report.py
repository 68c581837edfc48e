"""Derived analytics over benchmark results.

Everything here works on a :class:`FixtureSet`, which is either loaded from
the bundled published numbers or assembled from live :class:`RunRecord`
results. Efficiency tables divide performance by a resource normalizer;
the recommender is a plain argmax over those tables with provenance.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .harness import RunRecord

DATASETS = ("ag_news", "cola", "e2e_nlg", "samsum")
METHOD_ORDER = ("full", "ia3", "lora", "bitfit", "prompt")
TIER_ORDER = ("low", "medium", "high")
CONSTRAINTS = ("time", "memory", "performance")
# prompt tuning is left out of the efficiency comparison by default (it trails
# every other method on raw score, so per-parameter wins are not meaningful)
DEFAULT_CANDIDATES = ("full", "ia3", "lora", "bitfit")
TIE_TOL = 1e-4

Key = tuple  # (method, tier, dataset)


class MissingKeyError(KeyError):
    pass


@dataclass(frozen=True)
class Fixture:
    performance: float
    params: int
    runtime_seconds: float | None = None
    epochs: int | None = None


@dataclass
class FixtureSet:
    rows: dict[Key, Fixture]
    published: dict[tuple[str, Key], float] = field(default_factory=dict)
    sources: dict[tuple[str, Key], str] = field(default_factory=dict)

    def __post_init__(self):
        for key, f in self.rows.items():
            # a live run can legitimately score 0; resources must be positive
            bad = [n for n in ("params", "runtime_seconds", "epochs") if getattr(f, n) is not None and not getattr(f, n) > 0]
            if bad or not f.performance >= 0:
                raise ValueError(f"{key}: invalid {', '.join(bad) or 'performance'}")

    def __getitem__(self, key: Key) -> Fixture:
        try:
            return self.rows[key]
        except KeyError:
            raise MissingKeyError(f"no fixture for {key}") from None

    def keys(self):
        return _sorted_keys(self.rows)

    @classmethod
    def load(cls, path=None) -> "FixtureSet":
        """Parse the fixture CSV (``#`` lines are comments). Defaults to the bundled file."""
        if path is None:
            text = resources.files("peftbench").joinpath("data/published_results.csv").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        raw: dict[str, dict[Key, float]] = {}
        published, sources = {}, {}
        params: dict[str, int] = {}
        for rec in csv.DictReader(lines):
            q, m, t, d = rec["quantity"], rec["method"], rec["tier"], rec["dataset"]
            value = float(rec["value"])
            if q == "params":
                params[m] = int(rec["value"])
                continue
            key = (m, t, d)
            sources[(q, key)] = rec.get("source", "")
            if q.startswith("published_"):
                published[(q[len("published_") :], key)] = value
            else:
                raw.setdefault(q, {})[key] = value
        rows = {}
        for key, perf in raw.get("performance", {}).items():
            if key[0] not in params:
                raise MissingKeyError(f"no parameter count for method {key[0]!r}")
            epochs = raw.get("epochs", {}).get(key)
            rows[key] = Fixture(perf, params[key[0]], raw.get("runtime_seconds", {}).get(key), None if epochs is None else int(epochs))
        return cls(rows, published, sources)

    @classmethod
    def from_records(cls, records: Iterable[RunRecord]) -> "FixtureSet":
        """Live results keyed by (method, tier, task); ablation runs and failed cells are skipped."""
        rows = {}
        for r in records:
            if r.error or r.ablation:
                continue
            rows[(r.method, r.tier, r.task)] = Fixture(r.test_metric, r.trainable_params, r.wall_seconds, r.epochs_run)
        return cls(rows)


@dataclass
class EfficiencyTable:
    name: str
    normalizer: str
    values: dict[Key, float]

    def __getitem__(self, key: Key) -> float:
        try:
            return self.values[key]
        except KeyError:
            raise MissingKeyError(f"{self.name} has no entry for {key}") from None

    def __contains__(self, key) -> bool:
        return key in self.values

    def keys(self):
        return _sorted_keys(self.values)

    def scaled(self, factor: float) -> "EfficiencyTable":
        return EfficiencyTable(self.name, f"{self.normalizer} x {factor:g}", {k: v * factor for k, v in self.values.items()})


def _rank(seq, item):
    return seq.index(item) if item in seq else len(seq)


def _sorted_keys(keys) -> list[Key]:
    return sorted(keys, key=lambda k: (_rank(TIER_ORDER, k[1]), _rank(METHOD_ORDER, k[0]), k[0], _rank(DATASETS, k[2]), k[2]))


def performance_table(fx: FixtureSet) -> EfficiencyTable:
    return EfficiencyTable("performance", "1", {k: f.performance for k, f in fx.rows.items()})


def perf_per_params(fx: FixtureSet) -> EfficiencyTable:
    """Performance per hundred thousand trainable parameters."""
    return EfficiencyTable("perf_per_params", "params / 1e5", {k: f.performance / (f.params / 1e5) for k, f in fx.rows.items()})


def perf_per_minute(fx: FixtureSet) -> EfficiencyTable:
    """Performance per minute of training; keys without a runtime are absent."""
    return EfficiencyTable(
        "perf_per_minute",
        "runtime_seconds / 60",
        {k: f.performance / (f.runtime_seconds / 60) for k, f in fx.rows.items() if f.runtime_seconds is not None},
    )


@dataclass
class RuntimeReport:
    ratios: dict[Key, float]
    # (tier, dataset) -> {"fastest": .., "slowest": .., "mean": ..}
    speedups: dict[tuple[str, str], dict[str, float]]


def normalized_runtime(fx: FixtureSet, methods: Sequence[str] | None = None) -> RuntimeReport:
    """PEFT runtime divided by full-tuning runtime, plus full-tuning speedups.

    Speedup is ``1 - full / peft`` where ``peft`` is the fastest, the slowest
    or the mean runtime over the PEFT methods present for that cell.
    """
    cells = sorted({(t, d) for (m, t, d), f in fx.rows.items() if f.runtime_seconds is not None}, key=lambda c: (_rank(TIER_ORDER, c[0]), _rank(DATASETS, c[1])))
    ratios, speedups = {}, {}
    for tier, ds in cells:
        base = fx.rows.get(("full", tier, ds))
        if base is None or base.runtime_seconds is None:
            raise MissingKeyError(f"no full-tuning runtime for ({tier}, {ds})")
        peft = []
        for (m, t, d), f in fx.rows.items():
            if (t, d) != (tier, ds) or f.runtime_seconds is None or (methods is not None and m not in methods and m != "full"):
                continue
            ratios[(m, t, d)] = f.runtime_seconds / base.runtime_seconds
            if m != "full":
                peft.append(f.runtime_seconds)
        if peft:
            full = base.runtime_seconds
            speedups[(tier, ds)] = {
                "fastest": 1 - full / min(peft),
                "slowest": 1 - full / max(peft),
                "mean": 1 - full / (sum(peft) / len(peft)),
            }
    return RuntimeReport({k: ratios[k] for k in _sorted_keys(ratios)}, speedups)


# ---------------------------------------------------------------------------
# recommendation


@dataclass
class Tables:
    performance: EfficiencyTable
    perf_per_params: EfficiencyTable
    perf_per_minute: EfficiencyTable
    epochs: dict[Key, int] = field(default_factory=dict)

    @classmethod
    def from_fixtures(cls, fx: FixtureSet) -> "Tables":
        return cls(performance_table(fx), perf_per_params(fx), perf_per_minute(fx), {k: f.epochs for k, f in fx.rows.items() if f.epochs is not None})


@dataclass
class Recommendation:
    constraint: str
    tier: str
    methods: tuple[str, ...]
    per_dataset: dict[str, tuple[str, ...]]
    provenance: str
    scores: dict[str, dict[str, float]] = field(default_factory=dict)

    def render(self) -> str:
        lines = [f"constraint={self.constraint} tier={self.tier} -> {' / '.join(self.methods)}"]
        for ds, winners in self.per_dataset.items():
            cell = self.scores.get(ds, {})
            detail = ", ".join(f"{m}={cell[m]:.5g}" for m in sorted(cell, key=lambda m: -cell[m]))
            lines.append(f"  {ds}: {' / '.join(winners)}  [{detail}]")
        lines.append(f"  provenance: {self.provenance}")
        return "\n".join(lines)


def _argmax(scores: Mapping[str, float], tol: float) -> tuple[str, ...]:
    best = max(scores.values())
    return tuple(sorted((m for m, v in scores.items() if best - v <= tol * abs(best)), key=lambda m: _rank(METHOD_ORDER, m)))


def recommend(
    tables: Tables | FixtureSet,
    constraint: str,
    tier: str,
    dataset: str | None = None,
    candidates: Sequence[str] = DEFAULT_CANDIDATES,
    tol: float = TIE_TOL,
) -> Recommendation:
    """Argmax of the table matching ``constraint`` within ``tier``.

    Per dataset, every method within ``tol`` (relative to the best value) is
    reported. Without ``dataset`` the tier-level pick is the plurality of
    per-dataset winners, again with ties kept.
    """
    if constraint not in CONSTRAINTS:
        raise ValueError(f"unknown constraint {constraint!r}; expected one of {CONSTRAINTS}")
    if isinstance(tables, FixtureSet):
        tables = Tables.from_fixtures(tables)
    if constraint == "memory":
        table, rule = tables.perf_per_params.values, "argmax perf_per_params"
    elif constraint == "performance":
        table, rule = tables.performance.values, "argmax performance"
    else:
        table, rule = tables.perf_per_minute.values, "argmax perf_per_minute"
        if not any(k[1] == tier for k in table):
            # no runtimes for this tier: fall back to fewest epochs to converge
            table = {k: -float(v) for k, v in tables.epochs.items()}
            rule = "fewest epochs to best validation loss"
            if not any(k[1] == tier for k in table):
                raise MissingKeyError(f"no runtime or convergence data for tier {tier!r}")
    cells: dict[str, dict[str, float]] = {}
    for (m, t, d), v in table.items():
        if t == tier and m in candidates and (dataset is None or d == dataset):
            cells.setdefault(d, {})[m] = v
    if not cells:
        raise MissingKeyError(f"no {constraint} data for tier {tier!r}" + (f" dataset {dataset!r}" if dataset else ""))
    order = sorted(cells, key=lambda d: (_rank(DATASETS, d), d))
    per_dataset = {d: _argmax(cells[d], tol) for d in order}
    votes = Counter(m for w in per_dataset.values() for m in w)
    top = max(votes.values())
    picks = tuple(sorted((m for m, c in votes.items() if c == top), key=lambda m: _rank(METHOD_ORDER, m)))
    vote_txt = ", ".join(f"{m} {c}/{len(order)}" for m, c in sorted(votes.items(), key=lambda x: (-x[1], _rank(METHOD_ORDER, x[0]))))
    provenance = f"{rule} over {{{', '.join(candidates)}}} at tier {tier}; per-dataset wins: {vote_txt}"
    return Recommendation(constraint, tier, picks, per_dataset, provenance, {d: dict(cells[d]) for d in order})


# ---------------------------------------------------------------------------
# checks against published numbers


@dataclass(frozen=True)
class Mismatch:
    key: Key
    computed: float
    published: float
    error: float
    tolerance: float


def derivation_check(
    fx: FixtureSet, table: EfficiencyTable, quantity: str, abs_tol: float | None = None, rel_tol: float | None = None, exempt: Sequence[str] = ()
) -> tuple[int, list[Mismatch]]:
    """Compare ``table`` to published values of ``quantity``; returns (#compared, mismatches)."""
    if (abs_tol is None) == (rel_tol is None):
        raise ValueError("give exactly one of abs_tol, rel_tol")
    n, bad = 0, []
    for (q, key), pub in sorted(fx.published.items(), key=lambda x: _sorted_keys([x[0][1]])[0] + (x[0][0],)):
        if q != quantity or key[0] in exempt:
            continue
        got = table[key]
        n += 1
        if abs_tol is not None:
            err, tol = abs(got - pub), abs_tol
        else:
            err, tol = abs(got - pub) / abs(pub), rel_tol
        if not err <= tol:
            bad.append(Mismatch(key, got, pub, err, tol))
    return n, bad


# ---------------------------------------------------------------------------
# rendering


def fmt_value(v: float, digits: int = 4) -> str:
    if v == 0:
        return "0"
    if abs(v) < 1e-3:
        return f"{v:.{digits - 1}E}"
    return f"{v:.{digits}g}"


def align(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    out = ["  ".join(str(h).ljust(w) if i == 0 else str(h).rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    out.append("  ".join("-" * w for w in widths))
    for r in rows:
        out.append("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(out)


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def grid_rows(values: Mapping[Key, object], fmt=fmt_value) -> tuple[list[str], list[list[str]]]:
    """Pivot (method, tier, dataset) -> value into 'method (tier)' rows and dataset columns."""
    keys = _sorted_keys(values)
    cols = sorted({k[2] for k in keys}, key=lambda d: (_rank(DATASETS, d), d))
    row_ids = list(dict.fromkeys((k[0], k[1]) for k in keys))
    rows = []
    for m, t in row_ids:
        rows.append([f"{m} ({t})"] + [fmt(values[(m, t, d)]) if (m, t, d) in values else "-" for d in cols])
    return ["method (tier)", *cols], rows


def render_table(table: EfficiencyTable | Mapping[Key, object], csv_out: bool = False, fmt=fmt_value) -> str:
    values = table.values if isinstance(table, EfficiencyTable) else table
    header, rows = grid_rows(values, fmt)
    if csv_out:
        return to_csv(["method", "tier", "dataset", "value"], [[*k, values[k]] for k in _sorted_keys(values)])
    title = f"{table.name} (performance / {table.normalizer})\n" if isinstance(table, EfficiencyTable) and table.normalizer != "1" else ""
    return title + align(header, rows)


def render_runtime(rep: RuntimeReport, csv_out: bool = False) -> str:
    if csv_out:
        rows = [[*k, v] for k, v in rep.ratios.items()]
        rows += [["speedup:" + agg, t, d, v] for (t, d), s in rep.speedups.items() for agg, v in s.items()]
        return to_csv(["method", "tier", "dataset", "value"], rows)
    parts = ["runtime ratio (method time / full-tuning time)", render_table(rep.ratios, fmt=lambda v: f"{v:.3f}")]
    srows = [[f"{t}/{d}", *(f"{100 * s[a]:.1f}%" for a in ("fastest", "slowest", "mean"))] for (t, d), s in rep.speedups.items()]
    parts += ["", "full-tuning speedup 1 - full/peft", align(["tier/dataset", "vs fastest", "vs slowest", "vs mean"], srows)]
    return "\n".join(parts)


def convergence_table(fx: FixtureSet) -> dict[Key, str]:
    return {k: f"Ep. {f.epochs}; {f.runtime_seconds:.0f}" for k, f in fx.rows.items() if f.epochs is not None and f.runtime_seconds is not None}


def ablation_table(records: Iterable[RunRecord]) -> tuple[list[str], list[list[str]]]:
    """Rows per ablation label, columns per task; failed cells show their error kind."""
    cells: dict[tuple[str, str], str] = {}
    for r in records:
        label = r.ablation or r.method
        cells[(label, r.task)] = "error" if r.error else fmt_value(r.test_metric)
    labels = list(dict.fromkeys(k[0] for k in sorted(cells)))
    tasks = sorted({k[1] for k in cells})
    return ["config", *tasks], [[lab, *(cells.get((lab, t), "-") for t in tasks)] for lab in labels]


def results_report(records: Sequence[RunRecord], csv_out: bool = False) -> str:
    """Performance, convergence and efficiency tables from live run records."""
    records = list(records)
    if csv_out:
        cols = ["fingerprint", "method", "tier", "task", "ablation", "metric_name", "test_metric", "best_epoch", "epochs_run", "wall_seconds", "trainable_params", "error"]
        return to_csv(cols, [[getattr(r, c) if getattr(r, c) is not None else "" for c in cols] for r in records])
    fx = FixtureSet.from_records(records)
    parts = []
    if fx.rows:
        parts += ["test metric", render_table(performance_table(fx)), ""]
        parts += ["convergence (epochs; seconds)", render_table(convergence_table(fx), fmt=str), ""]
        parts += [render_table(perf_per_params(fx)), "", render_table(perf_per_minute(fx)), ""]
    abl = [r for r in records if r.ablation or r.error]
    if abl:
        header, rows = ablation_table(abl)
        parts += ["ablations / failed cells", align(header, rows), ""]
    failed = [r for r in records if r.error]
    for r in failed:
        parts.append(f"FAILED {r.fingerprint} {r.method}/{r.tier}/{r.task} {r.ablation}: {r.error}")
    return "\n".join(parts).rstrip() + "\n"


def speedup_percent(x: float) -> int:
    """Whole-percent truncation, the convention of the published speedup quotes."""
    return math.floor(100 * x + 1e-9)
