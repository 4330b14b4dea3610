"""Command-line entry point: ``downscale-lab <subcommand>``.

Exit codes: 0 ok, 2 configuration or input error, 3 training divergence,
4 at least one matrix cell failed, 5 self-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checks import run_checks
from .config import ConfigError, RunConfig, load
from .data import CalibrationError, Dataset, DatasetFormatError, generate_dataset, load_dataset, save_dataset, summary
from .model import CheckpointFormatError
from .optim import DivergenceError
from .render import DIVERGING, SEQUENTIAL, panel_filename, render_heatmap, render_panel, symmetric_range
from .training import MATRIX_LABELS, ResultRow, ResultsTable, evaluate, load_run, predict, run_matrix, save_run, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CELL_FAILED = 4
EXIT_CHECK_FAILED = 5

THREADS_ENV = "DOWNSCALE_LAB_THREADS"
log = logging.getLogger("downscale_lab")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="downscale-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="sectioned key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        p.add_argument("--seed", type=int, help="seed override (data seed for gen-data, training seed otherwise)")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if data:
            p.add_argument("--data", help="dataset container produced by gen-data")
            p.add_argument("--gen", action="store_true", help="generate the dataset from the config instead of --data")

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"), data=False)
    common(sub.add_parser("train", help="train one experiment cell"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("matrix", help="run the six-cell loss x preprocessing matrix")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    p = sub.add_parser("render", help="render prediction, truth and difference heatmaps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="test sample to render")
    p = sub.add_parser("check", help="run the fast invariant suite")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


# -- helpers ---------------------------------------------------------------


def _resolve(args) -> RunConfig:
    cfg = load(args.config, args.set)
    if args.seed is not None:
        if args.command == "gen-data":
            cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
        else:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), seeds=(args.seed,))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg: RunConfig) -> tuple[Dataset, RunConfig]:
    """Load or generate the dataset; the resolved config adopts its spec."""
    if args.data and args.gen:
        raise UsageError("pass either --data or --gen, not both")
    if args.data:
        ds = load_dataset(args.data)
        return ds, replace(cfg, data=ds.spec)
    if args.gen:
        return generate_dataset(cfg.data), cfg
    raise UsageError("no dataset: pass --data PATH or --gen")


def write_manifest(out: Path, args, cfg: RunConfig, extra: dict | None = None) -> Path:
    """Resolved config plus provenance comments; loadable with --config."""
    lines = [
        f"# downscale-lab {__version__}",
        f"# command: {args.command}",
        f"# argv: {shlex.join(sys.argv[1:])}",
        f"# reproduce: downscale-lab {args.command} --config manifest.txt --gen",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n\n" + cfg.to_text())
    return path


def worker_cap(requested: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    jobs = max(1, requested)
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return jobs


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    ds = generate_dataset(cfg.data)
    path = out / "dataset.dsl"
    save_dataset(ds, path)
    stats = summary(ds)
    (out / "summary.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    write_manifest(out, args, cfg, {"dataset": path.name})
    for k, v in stats.items():
        print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    ds, cfg = _dataset(args, cfg)
    out = _out_dir(args)
    spec = cfg.experiment()
    write_manifest(out, args, cfg)
    try:
        result = train(spec, ds)
    except DivergenceError as err:
        print(f"training diverged in epoch {err.epoch}: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    report = evaluate(result.model, result.preprocessor, ds.test)
    row = ResultRow(spec.label, spec.train.seed, report, result.preprocessor.gamma, "ok", spec.train)
    save_run(out, spec, ds.spec, result, row)
    print(ResultsTable(spec.variable, [row]).to_text(), end="")
    print(f"best epoch {result.history.best_epoch + 1}/{len(result.history)}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model, pre, spec, _ = load_run(args.checkpoint)
    ds, cfg = _dataset(args, cfg)
    if ds.spec.variable != spec.variable:
        raise UsageError(f"checkpoint was trained on {spec.variable}, dataset holds {ds.spec.variable}")
    out = _out_dir(args)
    report = evaluate(model, pre, ds.test)
    row = ResultRow(spec.label, spec.train.seed, report, pre.gamma, "ok", spec.train)
    table = ResultsTable(spec.variable, [row])
    (out / "metrics.csv").write_text(table.to_csv())
    write_manifest(out, args, replace(cfg, train=spec.train, loss=spec.loss, preproc=spec.preproc))
    print(table.to_text(), end="")
    return EXIT_OK


def _matrix_panel(out: Path, ds: Dataset, table: ResultsTable, seed: int) -> Path | None:
    truth = ds.test[0].target[0]
    panels = [("truth", truth), ("input", ds.test[0].input[0])]
    for label in MATRIX_LABELS:
        pred = table.previews.get((label, seed))
        if pred is None:
            pred = np.zeros_like(truth)  # failed cell renders flat
        panels.append((label, pred))
    lo, hi = float(truth.min()), float(truth.max())
    if not lo < hi:
        hi = lo + 1.0
    path = out / panel_filename(ds.spec.variable, "matrix", "panel")
    render_panel(panels, (lo, hi), path, SEQUENTIAL)
    return path


def cmd_matrix(args) -> int:
    cfg = _resolve(args)
    ds, cfg = _dataset(args, cfg)
    out = _out_dir(args)
    jobs = worker_cap(args.jobs)
    write_manifest(out, args, cfg, {"jobs": jobs})

    def on_cell(spec, row):
        log.info("finished %s seed %d: %s", spec.label, spec.train.seed, row.status)

    table = run_matrix(ds, cfg.train, cfg.seeds, jobs=jobs, on_cell=on_cell, out_dir=out / "cells")
    (out / "results.csv").write_text(table.to_csv())
    (out / "results.txt").write_text(table.to_text())
    panel = _matrix_panel(out, ds, table, cfg.seeds[0])
    print(table.to_text(), end="")
    print(f"panel: {panel}")
    if table.failed:
        print(f"{len(table.failed)} cell(s) failed", file=sys.stderr)
        return EXIT_CELL_FAILED
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _resolve(args)
    model, pre, spec, _ = load_run(args.checkpoint)
    ds, cfg = _dataset(args, cfg)
    if not 0 <= args.index < len(ds.test):
        raise UsageError(f"--index {args.index} outside test split of size {len(ds.test)}")
    out = _out_dir(args)
    pair = ds.test[args.index : args.index + 1]
    pred = predict(model, pre, pair)[2][0, 0]
    truth = pair[0].target[0]
    lo, hi = float(min(truth.min(), pred.min())), float(max(truth.max(), pred.max()))
    hi = hi if hi > lo else lo + 1.0
    var = ds.spec.variable
    written = []
    for kind, field, rng, cmap in (
        ("prediction", pred, (lo, hi), SEQUENTIAL),
        ("truth", truth, (lo, hi), SEQUENTIAL),
        ("difference", truth - pred, symmetric_range(truth - pred), DIVERGING),
    ):
        path = out / panel_filename(var, spec.label, kind)
        render_heatmap(field, rng, cmap, path)
        written.append(path)
    write_manifest(out, args, replace(cfg, train=spec.train, loss=spec.loss, preproc=spec.preproc), {"index": args.index})
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24s} {r.detail}  ({r.seconds:.2f}s)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
    "render": cmd_render,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CalibrationError, DatasetFormatError, CheckpointFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
