"""Command-line driver: ``dlcpsim run | preset | optimize-thresholds | drop-lab | report | show-config``."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config, load_optimize_config
from .presets import PRESETS, get_preset, run_preset
from .queueing import CostModel, InfeasibleError, QueueingModel, optimize_thresholds
from .report import report
from .scenario import run_and_write, write_summary
from .sgdlab import (LAYER_BANDS, MAGNITUDE_BANDS, DropMode, DropPolicy, TaskKind, ToyTask,
                     fit_cost_curves, sweep, validate_task, write_outcomes)


def parse_seeds(text: str) -> list[int]:
    """``"1,2,5"``, ``"1-5"`` or ``"1..5"`` (inclusive ranges; items may be mixed)."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        sep = ".." if ".." in part else ("-" if "-" in part[1:] else None)
        if sep:
            lo, hi = part.split(sep, 1)
            if int(hi) < int(lo):
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _run_seed(args) -> dict:
    cfg, seed, out = args
    return run_and_write(cfg, seed, Path(out), cfg.run.name)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    seeds = args.seeds or cfg.run.seeds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, s, str(out / f"seed-{s}")) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_run_seed, tasks))
    else:
        rows = [_run_seed(t) for t in tasks]
    write_summary(out / "summary.csv", rows)
    print(report(out, plots=args.plots or cfg.metrics.plots))
    return 0


def cmd_preset(args) -> int:
    if args.list or not args.name:
        for name in PRESETS:
            print(f"{name:18s} {get_preset(name).description}")
        return 0
    preset = get_preset(args.name)
    out = Path(args.out or f"results/{preset.name}")
    _, manifest = run_preset(preset, out, args.seeds, args.jobs)
    print(report(out, plots=args.plots))
    print()
    failed = 0
    for p in manifest["properties"]:
        print(f"{'PASS' if p['holds'] else 'FAIL'}  {p['name']}: {p['description']}")
        failed += not p["holds"]
    return 1 if failed and args.strict else 0


def cmd_optimize(args) -> int:
    oc = load_optimize_config(args.config)
    m = oc.model
    model = QueueingModel(m.n_queues, m.buffer_packets, m.arrival_rate, m.service_rate, m.theta,
                          list(m.layer_sizes))
    if oc.cost.source == "anchors":
        cost = CostModel.from_anchors(m.n_queues, oc.cost.slope)
    elif oc.cost.source == "flat":
        cost = CostModel.flat(m.n_queues)
    else:
        cost = CostModel.read_csv(oc.cost.file, m.n_queues)
    try:
        th = optimize_thresholds(model, cost, formula=oc.search.formula, restarts=oc.search.restarts,
                                 seed=oc.search.seed, grid_limit=oc.search.grid_limit)
    except InfeasibleError as err:
        print(f"infeasible: {err}", file=sys.stderr)
        for row in err.report:
            print("  " + ", ".join(f"{k}={v}" for k, v in row.items()), file=sys.stderr)
        return 2
    th.write_csv(args.out)
    print(f"objective {th.objective:.6g} via {th.method} ({th.evaluated} evaluations)")
    for r in th.rows():
        print(f"  queue {r['queue']}: S={r['S']} L={r['L']} rho={r['rho']} "
              f"loss_small={r['loss_small']} loss_large={r['loss_large']}")
    print(f"wrote {args.out}")
    return 0


def drop_policies(grid: Sequence[float], modes: Sequence[str], block_size: Optional[int]) -> list[DropPolicy]:
    pols = [DropPolicy(block_size=block_size)]
    for p in grid:
        if p == 0:
            continue
        for mode in modes:
            if mode == "uniform":
                pols.append(DropPolicy(DropMode.UNIFORM, p, block_size=block_size))
            elif mode == "layer":
                pols += [DropPolicy(DropMode.LAYER_BAND, p, b, block_size) for b in LAYER_BANDS]
            elif mode == "magnitude":
                pols += [DropPolicy(DropMode.MAGNITUDE_BAND, p, b, block_size) for b in MAGNITUDE_BANDS]
            else:
                raise ValueError(f"unknown drop mode {mode!r}")
    return pols


def cmd_drop_lab(args) -> int:
    task = ToyTask(kind=args.task, learning_rate=args.lr, target=args.target,
                   max_epochs=args.max_epochs)
    validate_task(task, args.seeds[0], args.workers)
    modes = [m.strip() for m in args.modes.split(",")]
    pols = drop_policies(args.p_grid, modes, args.block_size)
    outs = sweep(task, pols, args.seeds, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_outcomes(out / "outcomes.csv", outs)
    base = [o for o in outs if o.p == 0]
    written = [out / "outcomes.csv"]
    if "magnitude" in modes:
        cost = fit_cost_curves([o for o in outs if o.p > 0], base, task.max_epochs, args.n_queues)
        cost.write_csv(out / "cost_curves.csv")
        written.append(out / "cost_curves.csv")
    gran = "element" if not args.block_size or args.block_size == 1 else f"blocks of {args.block_size}"
    info = {"task": task.kind.value, "target": task.target, "learning_rate": task.learning_rate,
            "workers": args.workers, "seeds": list(args.seeds), "granularity": gran,
            "p_grid": list(args.p_grid)}
    (out / "droplab.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"{len(outs)} runs at {gran} granularity; wrote {', '.join(map(str, written))}")
    return 0


def cmd_report(args) -> int:
    print(report(args.dir, plots=not args.no_plots))
    return 0


def cmd_show_config(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    print(cfg.to_toml(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dlcpsim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a configuration file for each seed")
    p.add_argument("--config", "-c", required=True, help="run configuration (TOML)")
    p.add_argument("--seeds", type=parse_seeds, help="e.g. 1,2,3 or 1-5 (default: run.seeds)")
    p.add_argument("--out", "-o", default="results/run", help="result directory")
    p.add_argument("--jobs", "-j", type=int, default=1, help="parallel seed runs")
    p.add_argument("--plots", action="store_true", help="render PNG plots")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("preset", help="run a named scenario preset and check its properties")
    p.add_argument("name", nargs="?", choices=list(PRESETS))
    p.add_argument("--list", action="store_true", help="list presets")
    p.add_argument("--seeds", type=parse_seeds)
    p.add_argument("--out", "-o", help="result directory (default results/<preset>)")
    p.add_argument("--jobs", "-j", type=int, default=1)
    p.add_argument("--plots", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 1 if any property fails")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("optimize-thresholds", help="optimal per-queue drop thresholds")
    p.add_argument("--config", "-c", required=True, help="queueing and cost configuration (TOML)")
    p.add_argument("--out", "-o", default="thresholds.csv")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("drop-lab", help="SGD drop-tolerance sweep and fitted cost curves")
    p.add_argument("--task", default=TaskKind.MLP_CLS.value, choices=[k.value for k in TaskKind])
    p.add_argument("--lr", type=float, default=ToyTask.learning_rate)
    p.add_argument("--target", type=float, default=None, help="default depends on the task")
    p.add_argument("--max-epochs", type=int, default=ToyTask.max_epochs)
    p.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0-4"))
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--p-grid", type=parse_floats, default=parse_floats("0.01,0.02,0.05,0.1,0.3"))
    p.add_argument("--modes", default="uniform,magnitude", help="comma list of uniform, layer, magnitude")
    p.add_argument("--block-size", type=int, default=None,
                   help="drop contiguous blocks of this many gradients (350 = one packet)")
    p.add_argument("--n-queues", type=int, default=7, help="queues in the emitted cost model")
    p.add_argument("--out", "-o", default="results/drop-lab")
    p.set_defaults(func=cmd_drop_lab)

    p = sub.add_parser("report", help="tables and plots for a result directory")
    p.add_argument("dir")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("show-config", help="print a configuration with every default filled in")
    p.add_argument("--config", "-c")
    p.set_defaults(func=cmd_show_config)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        print(f"dlcpsim: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
