"""Command line entry point: ``python -m unlearnlab <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import export_split
from .harness import (
    ExperimentConfig, _run_and_store, aggregate_from_dir, emit_figures, format_table, load_config,
    load_records, prepare_seed, run_sweep, write_aggregate,
)
from .metrics import CSV_COLUMNS


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", help="output directory (overrides run.output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="unlearnlab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the initial and ideal models")
    un = sub.add_parser("unlearn", parents=[common], help="one unlearning run")
    un.add_argument("--method", help="defaults to the first configured method")
    un.add_argument("--addon", help="defaults to the first configured add-on")
    sub.add_parser("sweep", parents=[common], help="every seed x method x add-on")
    sub.add_parser("report", parents=[common], help="aggregate table from stored runs")
    sub.add_parser("figures", parents=[common], help="plot-data CSVs from stored runs")
    return ap


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg.validate()


def _cmd_train(cfg, args):
    out = Path(cfg.output_dir)
    for s in cfg.seeds:
        split, _, _ = prepare_seed(cfg, s, out)
        export_split(out / f"seed_{s}" / "data", split)
        print(f"seed {s}: checkpoints in {out / f'seed_{s}'}")


def _cmd_unlearn(cfg, args):
    method = args.method or cfg.methods[0]
    addon = args.addon or cfg.addons[0]
    cfg = replace(cfg, methods=[method], addons=[addon]).validate()
    out = Path(cfg.output_dir)
    for s in cfg.seeds:
        rec = _run_and_store(cfg, s, method, addon, out, *prepare_seed(cfg, s, out))
        if rec.status != "ok":
            raise RuntimeError(f"run {rec.run_id} failed: {rec.error}")
        last = rec.rows()[-1]
        print(f"{rec.run_id}: " + ", ".join(f"{c}={last[c]:.4g}" for c in CSV_COLUMNS[5:]))


def _cmd_sweep(cfg, args):
    records = run_sweep(cfg)
    failed = [r for r in records if r.status != "ok"]
    print((Path(cfg.output_dir) / "aggregate.txt").read_text() if len(failed) < len(records) else "")
    if failed:
        print(f"{len(failed)} of {len(records)} runs failed", file=sys.stderr)
        return 1
    return 0


def _cmd_report(cfg, args):
    out = Path(cfg.output_dir)
    if not (out / "runs").exists():
        raise FileNotFoundError(f"no runs under {out}")
    table = aggregate_from_dir(out)
    write_aggregate(out, table=table)
    print(format_table(table), end="")


def _cmd_figures(cfg, args):
    out = Path(cfg.output_dir)
    result = emit_figures(load_records(out), out / "figures")
    for name, path in result["paths"].items():
        print(f"{name}: {path}")
    for series, counts in result["regimes"].items():
        print(f"regimes {series}: {counts}")


COMMANDS = {"train": _cmd_train, "unlearn": _cmd_unlearn, "sweep": _cmd_sweep,
            "report": _cmd_report, "figures": _cmd_figures}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args) or 0
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"unlearnlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
