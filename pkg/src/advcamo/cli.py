"""Command-line entry point: ``advcamo <command> --config experiment.yaml``.

Exit codes: 0 success, 1 operational failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import plotting
from .evaluation import (
    REFERENCE_DELTAS,
    evaluate_external,
    paired_ttest,
    read_external_manifest,
    run_neighborhood_check,
    run_random_baseline,
    run_transfer_matrix,
    similarity_summary,
    summarize_external,
)
from .experiment import (
    ConfigError,
    build_context,
    load_config,
    make_toy_experiment,
    registry_names,
    run_directory,
)
from .models import CalibrationError, calibrate_threshold, recognition_rate, write_thresholds
from .optimizer import OptimizationError, optimize_pattern
from .pattern import FAMILIES, load_params, rasterize, save_params, save_png
from .report import (
    Table,
    accuracy_table,
    baseline_table,
    external_table,
    neighborhood_table,
    similarity_table,
    simulated_average_table,
    transfer_tables,
    ttest_table,
    write_report,
    write_tsv,
)

log = logging.getLogger("advcamo")

FOOTER = (
    "Accuracy counts mated pairs only (patterned probe vs clean gallery).",
    "Paired comparisons use a two-sided paired t-test.",
)


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _plan(args, cfg, steps) -> int:
    _dump({"command": args.command, "config": cfg.to_dict(), "steps": steps})
    return 0


def _restart_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# --- commands -----------------------------------------------------------------


def cmd_calibrate(args, cfg) -> int:
    if args.dry_run:
        return _plan(args, cfg, ["load dataset", f"calibrate {registry_names(cfg)}", f"write {cfg.thresholds_path}"])
    ctx = build_context(cfg, thresholds=False)
    run = run_directory(cfg, "calibrate", args.out)
    rows, ok = [], []
    for m in ctx.models:
        try:
            calibrate_threshold(m, ctx.pairs)
            ok.append(m)
            rows.append([m.name, m.threshold, m.calibration_accuracy, m.baseline, "ok"])
        except CalibrationError as exc:
            rows.append([m.name, None, None, None, f"failed: {exc}"])
    table = Table("calibration", "Calibration", ["model", "threshold", "accuracy", "baseline", "status"], rows)
    write_tsv(table, run / "calibration.tsv")
    write_thresholds(ok, ctx.calibration_hash, run / "thresholds.json")
    if ok:
        write_thresholds(ok, ctx.calibration_hash, cfg.thresholds_path)
    write_report(run, [table], FOOTER)
    print((run / "report.txt").read_text(), end="")
    print(f"run directory: {run}")
    return 0 if len(ok) == len(ctx.models) else 1


def _one_restart(cfg_dict_path: str, model_name: str, family: str, seed: int, trace_path: str):
    """Worker entry point; rebuilds its own context and model handle."""
    import torch

    torch.set_num_threads(1)
    cfg = load_config(cfg_dict_path)
    ctx = build_context(cfg)
    return _run_restart(ctx, model_name, family, seed, trace_path)


def _run_restart(ctx, model_name, family, seed, trace_path):
    import dataclasses

    cfg = ctx.config
    opt = dataclasses.replace(cfg.optimization, seed=seed)
    model = ctx.model(model_name)
    trace = optimize_pattern(opt, family, model, ctx.mated, palette=ctx.palette, trace_path=trace_path)
    canvas = ctx.mated[0].probe.shape
    acc = recognition_rate(model, ctx.mated, rasterize(trace.best_params, *canvas, opt.softness), opt.blend)
    return trace, acc


def cmd_optimize(args, cfg) -> int:
    if args.family not in FAMILIES:
        raise ConfigError(f"unknown family {args.family!r}")
    cfg.validate()
    seeds = _restart_seeds(cfg.seed, args.restarts)
    if args.dry_run:
        return _plan(args, cfg, [f"restart {k}: seed {s}" for k, s in enumerate(seeds)])
    ctx = build_context(cfg)
    model_name = args.model or ctx.models[0].name
    ctx.model(model_name)
    run = run_directory(cfg, "optimize", args.out)
    results, failures = {}, {}
    jobs = max(1, min(args.jobs, args.restarts))
    if jobs > 1:
        cfg_path = run / "resolved_config.yaml"
        _write_resolved(cfg, cfg_path)
        with ProcessPoolExecutor(jobs, mp_context=get_context("spawn")) as pool:
            futures = {
                k: pool.submit(_one_restart, str(cfg_path), model_name, args.family, s, str(run / f"trace_{k}.jsonl"))
                for k, s in enumerate(seeds)
            }
            for k, fut in futures.items():
                try:
                    results[k] = fut.result()
                except Exception as exc:  # a crashed restart must not take the others down
                    failures[k] = str(exc)
    else:
        for k, s in enumerate(seeds):
            try:
                results[k] = _run_restart(ctx, model_name, args.family, s, run / f"trace_{k}.jsonl")
            except OptimizationError as exc:
                failures[k] = str(exc)
    rows = []
    for k, s in enumerate(seeds):
        if k in results:
            trace, acc = results[k]
            save_params(trace.best_params, run / f"best_{k}.json")
            rows.append([k, s, trace.status, len(trace.iterations), trace.best_index, acc])
        else:
            rows.append([k, s, "failed", None, None, None])
    table = Table(
        "restarts",
        f"Optimization restarts ({model_name}, {args.family}, {cfg.optimization.mode})",
        ["restart", "seed", "status", "iterations", "best_index", "full_accuracy"],
        rows,
        [f"restart {k} failed: {msg}" for k, msg in failures.items()],
    )
    if not results:
        write_tsv(table, run / "restarts.tsv")
        print(f"all restarts failed; see {run}", file=sys.stderr)
        return 1
    best_k = min(results, key=lambda k: (results[k][1], k))
    best, best_acc = results[best_k][0].best_params, results[best_k][1]
    save_params(best, run / "best.json")
    canvas = ctx.mated[0].probe.shape
    save_png(rasterize(best, *canvas, cfg.optimization.softness), run / "best.png")
    plotting.optimization_trace([results[k][0] for k in sorted(results)], run / "trace.png")
    write_report(run, [table], FOOTER)
    print((run / "report.txt").read_text(), end="")
    _dump({"best_restart": best_k, "accuracy": best_acc, "params": best.to_dict()})
    print(f"run directory: {run}")
    return 0


def _write_resolved(cfg, path: Path) -> None:
    import yaml

    d = cfg.to_dict()
    d = {k: v for k, v in d.items() if v is not None}
    path.write_text(yaml.safe_dump(d, sort_keys=True))


def _named_params(specs: list[str]) -> dict:
    out = {}
    for spec in specs:
        name, _, path = spec.rpartition("=")
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"pattern file does not exist: {path}")
        out[name or path.stem] = load_params(path)
    return out


def cmd_evaluate(args, cfg) -> int:
    patterns = _named_params(args.params)
    if args.dry_run:
        return _plan(args, cfg, [f"evaluate {list(patterns)} on {registry_names(cfg)}"])
    ctx = build_context(cfg)
    run = run_directory(cfg, "evaluate", args.out)
    blend = cfg.optimization.blend
    canvas = ctx.mated[0].probe.shape
    accs = {"none": {m.name: recognition_rate(m, ctx.mated) for m in ctx.models}}
    for name, p in patterns.items():
        image = rasterize(p, *canvas)
        accs[name] = {m.name: recognition_rate(m, ctx.mated, image, blend) for m in ctx.models}
    names = [m.name for m in ctx.models]
    sims = similarity_summary(ctx.models, ctx.mated, {"none": None, **patterns}, blend)
    thresholds = {m.name: m.threshold for m in ctx.models}
    tables = [accuracy_table(names, accs), similarity_table(names, sims, thresholds)]
    (run / "figures").mkdir()
    plotting.similarity_distributions(sims, thresholds, run / "figures")
    write_report(run, tables, FOOTER)
    print((run / "report.txt").read_text(), end="")
    return 0


def cmd_random_baseline(args, cfg) -> int:
    ev = cfg.evaluation
    n_patterns = args.n_patterns or ev.get("n_patterns", 100)
    n_ids = args.n_identities or ev.get("n_identities", 100)
    if args.dry_run:
        return _plan(args, cfg, [f"{n_patterns} random patterns on {n_ids} identities"])
    ctx = build_context(cfg)
    run = run_directory(cfg, "random-baseline", args.out)
    stats = run_random_baseline(ctx.models, ctx.mated, n_patterns, n_ids, cfg.seed, cfg.optimization.blend)
    tables = [baseline_table([m.name for m in ctx.models], stats)]
    plotting.random_baseline(stats.rows, run / "random_baseline.png")
    write_report(run, tables, FOOTER)
    print((run / "report.txt").read_text(), end="")
    return 0


def cmd_neighborhood(args, cfg) -> int:
    patterns = _named_params(args.params)
    deltas = tuple(args.deltas)
    n = args.n_neighbors or cfg.evaluation.get("n_neighbors", 10)
    if args.dry_run:
        return _plan(args, cfg, [f"{n} neighbours of {list(patterns)}, deltas {deltas}"])
    ctx = build_context(cfg)
    run = run_directory(cfg, "neighborhood", args.out)
    results = {
        name: run_neighborhood_check(p, ctx.models, ctx.mated, n, deltas, cfg.seed, cfg.optimization.blend)
        for name, p in patterns.items()
    }
    tables = [neighborhood_table([m.name for m in ctx.models], results, deltas)]
    write_report(run, tables, FOOTER)
    print((run / "report.txt").read_text(), end="")
    return 0


def cmd_transfer_matrix(args, cfg) -> int:
    specs = {}
    for spec in args.pattern:
        opt_model, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--pattern expects OPT_MODEL=FILE, got {spec!r}")
        if not Path(path).exists():
            raise ConfigError(f"pattern file does not exist: {path}")
        p = load_params(path)
        specs[(opt_model, p.family, p.mode)] = p
    if args.dry_run:
        return _plan(args, cfg, [f"{k} on {registry_names(cfg)}" for k in specs])
    ctx = build_context(cfg)
    run = run_directory(cfg, "transfer-matrix", args.out)
    eval_models = [ctx.model(n) for n in args.models] if args.models else ctx.models
    matrix = run_transfer_matrix(specs, eval_models, ctx.mated, cfg.optimization.blend)
    tables = transfer_tables(matrix)
    plotting.transfer_heatmap(matrix, run)
    write_report(run, tables, FOOTER)
    print((run / "report.txt").read_text(), end="")
    return 0


def cmd_ingest(args, cfg) -> int:
    if not Path(args.manifest).exists():
        raise ConfigError(f"external manifest does not exist: {args.manifest}")
    records = read_external_manifest(args.manifest)
    simulated = _named_params(args.simulated or [])
    if args.dry_run:
        return _plan(args, cfg, [f"score {len(records)} external images on {registry_names(cfg)}"])
    ctx = build_context(cfg)
    run = run_directory(cfg, "ingest", args.out)
    gallery = {ident: [s.gallery] for ident, s in ctx.splits.items()}
    results = evaluate_external(records, ctx.models, gallery)
    names = [m.name for m in ctx.models]
    tables = [external_table(names, summarize_external(results))]
    if simulated:
        canvas = ctx.mated[0].probe.shape
        per = {(r["pattern_id"], r["model"]): r["accuracy"] for r in summarize_external(results, ("pattern_id", "model"))}
        sim_acc = {
            pid: {m.name: recognition_rate(m, ctx.mated, rasterize(p, *canvas), cfg.optimization.blend) for m in ctx.models}
            for pid, p in simulated.items()
        }
        average_over = cfg.evaluation.get("optimization_models") or names
        tables.append(simulated_average_table(sim_acc, average_over))
        sim, gen = [], []
        for pid, accs in sim_acc.items():
            for name in names:
                if (pid, name) in per:
                    sim.append(accs[name])
                    gen.append(per[(pid, name)])
        if len(sim) >= 2:
            tables.append(ttest_table({"simulated vs external": paired_ttest(sim, gen)}))
    write_report(run, tables, FOOTER)
    print((run / "report.txt").read_text(), end="")
    return 0


def cmd_render_pattern(args, cfg) -> int:
    p = load_params(args.params)
    out = Path(args.output) if args.output else None
    if args.dry_run:
        print(f"render {args.params} at {args.height}x{args.width}")
        return 0
    if out is None:
        root = Path(args.out or "runs")
        root.mkdir(parents=True, exist_ok=True)
        out = root / (Path(args.params).stem + ".png")
    save_png(rasterize(p, args.height, args.width, args.softness), out)
    print(out)
    return 0


def cmd_make_toy(args, cfg) -> int:
    if args.dry_run:
        print(f"generate toy experiment in {args.dest}")
        return 0
    path = make_toy_experiment(args.dest, args.identities, args.images, args.epochs, args.n_models, args.seed or 0)
    print(path)
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "random-baseline": cmd_random_baseline,
    "neighborhood": cmd_neighborhood,
    "transfer-matrix": cmd_transfer_matrix,
    "ingest": cmd_ingest,
    "render-pattern": cmd_render_pattern,
    "make-toy": cmd_make_toy,
}
NO_CONFIG = {"render-pattern", "make-toy"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--out", type=Path, help="root directory for run outputs")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    common.add_argument("--strict-compat", action="store_true", help="literal early-stop rule")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="advcamo", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("calibrate", parents=[common], help="fit per-model decision thresholds")

    p = sub.add_parser("optimize", parents=[common], help="optimize a pattern with restarts")
    p.add_argument("--family", default="stripes", choices=FAMILIES)
    p.add_argument("--model", help="registry name of the optimization model")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--mode", choices=("constrained", "unconstrained"))
    p.add_argument("--backend", choices=("whitebox", "blackbox"))
    p.add_argument("--max-iterations", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score pattern files on every model")
    p.add_argument("params", nargs="+", help="pattern file(s), optionally NAME=FILE")

    p = sub.add_parser("random-baseline", parents=[common], help="random-pattern statistics")
    p.add_argument("--n-patterns", type=int)
    p.add_argument("--n-identities", type=int)

    p = sub.add_parser("neighborhood", parents=[common], help="robustness to small perturbations")
    p.add_argument("params", nargs="+")
    p.add_argument("--n-neighbors", type=int)
    p.add_argument("--deltas", type=float, nargs=3, default=REFERENCE_DELTAS, metavar=("DC", "DW_PX", "DA_DEG"))

    p = sub.add_parser("transfer-matrix", parents=[common], help="cross-model transferability")
    p.add_argument("--pattern", action="append", required=True, help="OPT_MODEL=FILE, repeatable")
    p.add_argument("--models", nargs="+", help="evaluation models (default: whole registry)")

    p = sub.add_parser("ingest", parents=[common], help="score externally produced images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--simulated", action="append", help="PATTERN_ID=FILE for the paired comparison")

    p = sub.add_parser("render-pattern", parents=[common], help="write a pattern file as PNG")
    p.add_argument("params")
    p.add_argument("--output")
    p.add_argument("--height", type=int, default=112)
    p.add_argument("--width", type=int, default=112)
    p.add_argument("--softness", type=float, default=1.5)

    p = sub.add_parser("make-toy", parents=[common], help="generate the toy dataset and models")
    p.add_argument("dest")
    p.add_argument("--identities", type=int, default=48)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--n-models", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        import torch

        torch.set_num_threads(max(1, args.jobs))
        cfg = None
        if args.command not in NO_CONFIG:
            overrides = {"seed": args.seed}
            cfg = load_config(args.config, overrides)
            opt = cfg.optimization
            if args.strict_compat:
                opt.strict_compat = True
            for flag, field in (("mode", "mode"), ("backend", "backend"), ("max_iterations", "max_iterations")):
                if getattr(args, flag, None) is not None:
                    setattr(opt, field, getattr(args, flag))
            if opt.max_iterations and opt.early_stop_window > opt.max_iterations:
                opt.early_stop_window = opt.max_iterations
            cfg.validate()
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"advcamo: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
