"""Command-line entry point: ``peftbench {count,train,eval,bench,report,recommend}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import report as rp
from .accounting import count_total, count_trainable, table4_rows
from .model import PRESETS, ArchConfig, ConfigError, load_config
from .selection import EmptySelectionError, PeftConfig

EXIT_FAILED = 1
EXIT_USAGE = 2


def _arch(spec) -> ArchConfig:
    if isinstance(spec, str):
        try:
            return PRESETS[spec]
        except KeyError:
            raise ConfigError(f"unknown arch preset {spec!r}; choose from {sorted(PRESETS)}") from None
    return ArchConfig.from_dict(spec)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        print(text, end="" if text.endswith("\n") else "\n")


# ---------------------------------------------------------------------------


def cmd_count(args) -> int:
    if args.ablation_table:
        arch = _arch(args.arch or "xl")
        rows = []
        for label, cfg, published in table4_rows(arch):
            got = count_total(arch) if cfg is None else count_trainable(arch, cfg).trainable_params
            rows.append([label, got, published, "ok" if got == published else "MISMATCH"])
        header = ["configuration", "computed", "published", "check"]
        _emit(rp.to_csv(header, rows) if args.csv else rp.align(header, [[r[0], f"{r[1]:,}", f"{r[2]:,}", r[3]] for r in rows]), args.out)
        return 0 if all(r[3] == "ok" for r in rows) else EXIT_FAILED
    cfg = load_config(args.config) if args.config else {}
    arch = _arch(args.arch or cfg.get("arch", "xl"))
    peft = dict(cfg.get("peft", {}))
    if args.method:
        peft["method"] = args.method
    if args.seed is not None:
        sel = peft.get("layer_selection", {})
        sel = {"policy": sel} if isinstance(sel, str) else dict(sel)
        sel["seed"] = args.seed
        peft["layer_selection"] = sel
    pc = PeftConfig.from_dict(peft)
    try:
        rep = count_trainable(arch, pc)
    except EmptySelectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    rows = [[k, v] for k, v in rep.rows()]
    if args.csv:
        _emit(rp.to_csv(["component", "params"], rows + [["trainable", rep.trainable_params], ["total", rep.total_params]]), args.out)
    else:
        body = rp.align(["component", "params"], [[k, f"{v:,}"] for k, v in rows])
        body += f"\n\ntrainable {rep.trainable_params:,} of {rep.total_params:,} ({100 * rep.fraction:.4f}%)"
        _emit(body, args.out)
    return 0


def _grid_from(args, path_or_none):
    from .bench import GridConfig

    d = load_config(path_or_none) if path_or_none else {}
    if args.seed is not None:
        d["seed"] = args.seed
    return GridConfig.from_dict(d)


def cmd_train(args) -> int:
    from .adapters import save_adapters
    from .bench import METRICS, Cell, GridConfig, prepare_base, train_cell
    from .model import save_model
    from .tasks import TaskSpec, dump_corpus, generate_task, get_tier, load_corpus, tier_split

    cfg = load_config(args.config) if args.config else {}
    run = {k: cfg.pop(k) for k in ("task", "tier", "peft") if k in cfg}
    if args.seed is not None:
        cfg["seed"] = args.seed
    grid = GridConfig.from_dict(cfg)
    task = args.task or run.get("task", "classification")
    tier = args.tier or run.get("tier", "medium")
    peft = {**grid.method_peft(run.get("peft", {}).get("method", "lora")), **run.get("peft", {})}
    if args.method:
        peft = {**peft, **grid.method_peft(args.method), "method": args.method}
    cell = Cell(task, tier, peft["method"], peft)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    examples = load_corpus(args.corpus, labelled=task == "classification") if args.corpus else None
    base_path = prepare_base(grid, args.cache_dir or out)
    rec, model, adapters = train_cell(cell, grid, base_path, examples=examples)
    data = examples if examples is not None else generate_task(TaskSpec(kind=task, size=grid.corpus_size, seed=grid.data_seed))
    split = tier_split(data, get_tier(tier, eval_cap=grid.eval_cap), seed=grid.split_seed)
    for name in ("train", "val", "test"):
        dump_corpus(getattr(split, name), out / f"{name}.tsv")
    if cell.method == "full":
        save_model(model, out / "model.ckpt")
    else:
        save_adapters(model, adapters, out / "adapters.ckpt")
    (out / "record.jsonl").write_text(rec.to_json() + "\n")
    print(f"{rec.method} {rec.tier} {task}: {METRICS[task]}={rec.test_metric:.4f} best_epoch={rec.best_epoch} epochs={rec.epochs_run} trainable={rec.trainable_params:,}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import score

    preds = Path(args.predictions).read_text().splitlines()
    golds = Path(args.references).read_text().splitlines()
    if len(preds) != len(golds):
        print(f"error: {len(preds)} predictions vs {len(golds)} references", file=sys.stderr)
        return EXIT_USAGE
    mv = score(args.metric, preds, golds)
    if args.csv:
        _emit(rp.to_csv(["metric", "value", "n"], [[mv.name, mv.value, mv.n]]), args.out)
    else:
        _emit(rp.align(["metric", "value", "n"], [[mv.name, f"{mv.value:.4f}", str(mv.n)]]), args.out)
    return 0


def cmd_bench(args) -> int:
    from .bench import run_matrix

    grid = _grid_from(args, args.config)
    out = Path(args.out)
    records = run_matrix(grid, out_dir=out, workers=args.workers, cache_dir=args.cache_dir)
    text = rp.results_report(records)
    (out / "report.txt").write_text(text)
    (out / "results.csv").write_text(rp.results_report(records, csv_out=True))
    print(text, end="")
    failed = [r for r in records if r.error]
    return EXIT_FAILED if failed else 0


def _fixtures(args) -> rp.FixtureSet:
    if args.results:
        from .bench import read_results

        return rp.FixtureSet.from_records(read_results(args.results))
    return rp.FixtureSet.load(args.fixtures)


def cmd_report(args) -> int:
    if args.results and args.table == "runs":
        from .bench import read_results

        _emit(rp.results_report(read_results(args.results), csv_out=args.csv), args.out)
        return 0
    fx = _fixtures(args)
    parts, status = [], 0
    want = ("performance", "perf-per-params", "perf-per-minute", "runtime", "convergence") if args.table == "all" else (args.table,)
    for t in want:
        if t == "performance":
            parts.append(rp.render_table(rp.performance_table(fx), csv_out=args.csv, fmt=lambda v: rp.fmt_value(v, 5)))
        elif t == "perf-per-params":
            parts.append(rp.render_table(rp.perf_per_params(fx), csv_out=args.csv))
        elif t == "perf-per-minute":
            parts.append(rp.render_table(rp.perf_per_minute(fx), csv_out=args.csv))
        elif t == "runtime":
            parts.append(rp.render_runtime(rp.normalized_runtime(fx), csv_out=args.csv))
        elif t == "convergence":
            parts.append(rp.render_table(rp.convergence_table(fx), csv_out=args.csv, fmt=str))
        elif t == "check":
            text, ok = _check_text(fx)
            parts.append(text)
            status = 0 if ok else EXIT_FAILED
        else:
            raise ConfigError(f"table {t!r} needs --results")
    _emit(("\n" if args.csv else "\n\n").join(p.rstrip("\n") for p in parts), args.out)
    return status


def _check_text(fx: rp.FixtureSet) -> tuple[str, bool]:
    lines, ok = [], True
    for q, table, kw in (
        ("perf_per_params", rp.perf_per_params(fx), {"abs_tol": 1e-4}),
        ("perf_per_minute", rp.perf_per_minute(fx), {"rel_tol": 0.05, "exempt": ("lora",)}),
    ):
        n, bad = rp.derivation_check(fx, table, q, **kw)
        ok = ok and not bad
        lines.append(f"{q}: {n - len(bad)}/{n} published values reproduced")
        for m in bad:
            lines.append(f"  mismatch {'/'.join(m.key)}: computed {m.computed:.6g}, published {m.published:.6g}, error {m.error:.3g} > {m.tolerance:g}")
    return "\n".join(lines), ok


def cmd_recommend(args) -> int:
    fx = _fixtures(args)
    candidates = rp.METHOD_ORDER if args.include_prompt else rp.DEFAULT_CANDIDATES
    tiers = rp.TIER_ORDER if args.tier == "all" else (args.tier,)
    constraints = rp.CONSTRAINTS if args.constraint == "all" else (args.constraint,)
    recs, errors = [], []
    for c in constraints:
        for t in tiers:
            try:
                recs.append(rp.recommend(fx, c, t, dataset=args.dataset, candidates=candidates))
            except rp.MissingKeyError as exc:
                errors.append(f"{c}/{t}: {exc.args[0]}")
    if args.csv:
        rows = [[r.constraint, r.tier, "+".join(r.methods), d, "+".join(w), r.provenance] for r in recs for d, w in r.per_dataset.items()]
        _emit(rp.to_csv(["constraint", "tier", "recommended", "dataset", "dataset_winner", "provenance"], rows), args.out)
    else:
        _emit("\n\n".join(r.render() for r in recs), args.out)
    for e in errors:
        print(f"no recommendation for {e}", file=sys.stderr)
    return 0 if recs else EXIT_FAILED


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peftbench", description="PEFT benchmark toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("count", help="trainable/total parameter counts")
    c.add_argument("config", nargs="?", help='JSON file with "arch" (preset name or fields) and "peft"')
    c.add_argument("--arch", help="arch preset name (xl, desk)")
    c.add_argument("--method", help="override peft method")
    c.add_argument("--seed", type=int, help="layer-selection seed (random-half)")
    c.add_argument("--ablation-table", action="store_true", help="print the ablation parameter-count table")
    c.add_argument("--csv", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_count)

    t = sub.add_parser("train", help="fine-tune one configuration and save checkpoints")
    t.add_argument("config", nargs="?", help="JSON run config (grid fields plus task/tier/peft)")
    t.add_argument("--task", choices=["classification", "generation"])
    t.add_argument("--tier", choices=list(rp.TIER_ORDER))
    t.add_argument("--method", choices=list(rp.METHOD_ORDER))
    t.add_argument("--corpus", help="TSV corpus (input TAB target) instead of the generated task")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--cache-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a predictions file against references")
    e.add_argument("predictions")
    e.add_argument("references")
    e.add_argument("--metric", choices=["accuracy", "rouge-l"], default="accuracy")
    e.add_argument("--csv", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run an experiment grid")
    b.add_argument("config", nargs="?", help="JSON grid config")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int, help="worker processes (default: PEFTBENCH_WORKERS or 1)")
    b.add_argument("--cache-dir")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="tables from published fixtures or run results")
    r.add_argument("--results", help="results.jsonl from bench")
    r.add_argument("--fixtures", help="fixture CSV (default: bundled published numbers)")
    r.add_argument(
        "--table",
        default="all",
        choices=["all", "performance", "perf-per-params", "perf-per-minute", "runtime", "convergence", "check", "runs"],
    )
    r.add_argument("--csv", action="store_true")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("recommend", help="pick a method for a constraint and tier")
    m.add_argument("--constraint", default="all", choices=["all", *rp.CONSTRAINTS])
    m.add_argument("--tier", default="all", choices=["all", *rp.TIER_ORDER])
    m.add_argument("--dataset")
    m.add_argument("--results")
    m.add_argument("--fixtures")
    m.add_argument("--include-prompt", action="store_true")
    m.add_argument("--csv", action="store_true")
    m.add_argument("--out")
    m.set_defaults(func=cmd_recommend)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
