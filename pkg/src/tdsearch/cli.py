"""Command-line entry point: ``tdsearch <subcommand> [--config PATH] [--out DIR] [--seed N] [--jobs N]``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

from .workbench import PipelineConfig, StageError, load_config, report_from_dir, run_distill_only, run_pipeline

SUBCOMMANDS = {
    "shape-search": "Level 1: cost table, Pareto front and selected shape per matrix size",
    "cost-table": "Level 1 cost table only",
    "rank-evolve": "Levels 1-2: supernet proxy dataset, surrogate fit and evolutionary rank search",
    "distill": "Level 3: distill the genome found by rank-evolve in --out",
    "pipeline": "all three levels end to end",
    "report": "rewrite report.csv from the artifacts in --out",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdsearch", description="Hardware-aware tensor-decomposition search.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="PipelineConfig JSON file (toy defaults when omitted)")
        p.add_argument("--out", type=Path, help="artifact directory (overrides the config)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--jobs", type=int, help="worker threads (results do not depend on it)")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.jobs is not None:
        changes["jobs"] = args.jobs
    try:
        return dataclasses.replace(config, **changes)
    except ValueError as exc:
        raise StageError("config", str(exc)) from exc


def _summary(command: str, config: PipelineConfig, art) -> str:
    out = config.out_dir
    if command == "cost-table":
        rows = sum(len(t) for t in art.cost_tables.values())
        return f"cost-table: {rows} rows over {len(art.cost_tables)} matrix sizes -> {out}"
    if command == "shape-search":
        picks = ", ".join(f"{k}: {v['selected']['shape']} r={v['selected']['ranks']}" for k, v in art.shapes.items())
        return f"shape-search: {picks} -> {out}"
    g = art.genome
    head = f"genome {g['genome']} EDP {g['edp']:.4g} pJ*s spearman {art.spearman:.3f}"
    if command == "rank-evolve":
        return f"rank-evolve: {head} -> {out}"
    accs = " ".join(f"{k}={v['accuracy']:.4f}" for k, v in art.distill.items())
    return f"pipeline: {head}; {accs} -> {out}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            out = args.out if args.out is not None else Path(resolve_config(args).out_dir)
            rows = report_from_dir(out)
            total = rows[-1]
            print(f"report: {len(rows) - 1} layers, total EDP {total['edp']:.4g} pJ*s -> {out / 'report.csv'}")
            return 0
        config = resolve_config(args)
        if args.command == "distill":
            result = run_distill_only(config)
            print("distill: " + " ".join(f"{k}={v['accuracy']:.4f}" for k, v in result.items()))
            return 0
        through = {"cost-table": "cost-table", "shape-search": "shape", "rank-evolve": "rank", "pipeline": "distill"}
        art = run_pipeline(config, through[args.command])
        print(_summary(args.command, config, art))
        return 0
    except StageError as exc:
        print(f"error in stage {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
