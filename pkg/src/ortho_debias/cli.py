"""``ortho-debias`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as bd
from .experiments import (
    Cell,
    ExperimentSpec,
    SpecError,
    append_summary,
    canonicalize_summary,
    default_out,
    draw_subset,
    evaluate_run,
    layer_diagnostic,
    load_spec,
    run_dir,
    summary_rows,
    sweep,
    train_run,
)
from .plots import plot_export
from .trainers import METHODS


def _spec(args) -> ExperimentSpec:
    if args.spec:
        return load_spec(args.spec)
    return ExperimentSpec()


def _cell(args, spec: ExperimentSpec) -> Cell:
    n = int(spec.data.get("n_classes", 10))
    k = args.k_size if args.k_size is not None else spec.k_sizes[0]
    rho = args.rho if args.rho is not None else 1.0
    seed = args.seed if args.seed is not None else spec.seeds[0]
    if not 1 <= k <= n:
        raise SpecError(f"--k-size {k} outside 1..{n}")
    if not 0.0 <= rho <= 1.0:
        raise SpecError(f"--rho {rho} outside [0, 1]")
    return Cell(rho, k, seed, draw_subset(n, k, seed))


def cmd_generate_data(args) -> int:
    spec = _spec(args)
    cell = _cell(args, spec)
    out = run_dir(default_out(args.out), cell, "data")
    out.mkdir(parents=True, exist_ok=True)
    ds = bd.generate(cell.bias_config(spec))
    bd.save(ds, out / "dataset.odds")
    print(out / "dataset.odds")
    return 0


def cmd_train(args) -> int:
    spec = _spec(args)
    cell = _cell(args, spec)
    d = train_run(cell, args.method, spec, default_out(args.out))
    print(d)
    return 0


def cmd_evaluate(args) -> int:
    spec = _spec(args)
    cell = _cell(args, spec)
    out = default_out(args.out)
    report, ckpt_hash = evaluate_run(cell, args.method, spec, out)
    append_summary(out, summary_rows(cell, args.method, report, ckpt_hash))
    canonicalize_summary(out)
    print(json.dumps(report.aggregates() | {"accuracy": report.accuracy, "leakage": report.leakage}, indent=1))
    return 0


def cmd_sweep(args) -> int:
    spec = _spec(args)
    if args.seed is not None:
        spec.seeds = (args.seed,)
    if args.rho is not None:
        spec.rhos = (args.rho,)
    if args.k_size is not None:
        spec.k_sizes = (args.k_size,)
    if args.method:
        spec.methods = (args.method,)
    spec.validate()
    records = sweep(spec, default_out(args.out), args.jobs)
    failed = [r for r in records if r["status"] != "ok"]
    print(f"{len(records)} runs, {len(failed)} failed")
    for r in failed:
        print(f"  {r['cell']}/{r['method']}/{r['seed']}: {r['error']}")
    return 0


def cmd_layer_diagnostic(args) -> int:
    spec = _spec(args)
    out = default_out(args.out)
    diag = layer_diagnostic(spec, out, seed=args.seed, k_size=args.k_size)
    result = {"layers": diag.layers, "rhos": diag.rhos, "variance": diag.variance,
              "values": diag.values, "recommended": diag.recommended}
    text = json.dumps(result, indent=1, sort_keys=True)
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "layer_diagnostic.json").write_text(text)
    print(text)
    return 0


def cmd_plot(args) -> int:
    out = default_out(args.out)
    summary = out / "summary.csv"
    if not summary.exists():
        raise SpecError(f"{summary} does not exist; run a sweep first")
    for p in plot_export(summary, out / "plots", args.kind):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ortho-debias", description="Meta orthogonalization debiasing experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method=False):
        sp.add_argument("--spec", help="experiment spec file (key = value lines)")
        sp.add_argument("--out", help="output root (default $ORTHO_DEBIAS_OUT or ./runs)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rho", type=float)
        sp.add_argument("--k-size", type=int, dest="k_size")
        if method:
            sp.add_argument("--method", choices=METHODS, default="baseline")

    common(sub.add_parser("generate-data", help="write one cell's dataset file"))
    common(sub.add_parser("train", help="train one (cell, method, seed)"), method=True)
    common(sub.add_parser("evaluate", help="evaluate a trained run"), method=True)
    sp = sub.add_parser("sweep", help="run a spec's full grid, resumably")
    common(sp)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--jobs", type=int, default=1)
    common(sub.add_parser("layer-diagnostic", help="pick the concept layer by sensitivity variance"))
    sp = sub.add_parser("plot", help="export SVG figures from summary.csv")
    sp.add_argument("--out")
    sp.add_argument("--kind", choices=("rho", "k", "all"), default="all")
    return p


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "layer-diagnostic": cmd_layer_diagnostic,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SpecError, bd.DatasetError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
