"""Command-line entry point.

Subcommands: syngen, pretrain, embed, downstream, tsne, report. All take
``--out <dir>`` (run directory holding data/, models/, reports/ and the
manifest), ``--config <yaml>``, ``--seed <u64>`` (overrides the config's
master seed), and where applicable ``--cells ns-trad,seq-pe,...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, DataError, DemrepError, DivergenceError
from . import pipeline


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demrep",
                                     description="Demographic representation workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_cells in (("syngen", False), ("pretrain", True), ("embed", True),
                              ("downstream", True), ("tsne", True), ("report", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=Path, required=True, help="run output directory")
        if needs_cells:
            p.add_argument("--cells", type=str, default=None,
                           help="comma-separated grid cells (default: all six)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = pipeline.load_config(args.config)
        if args.seed is not None:
            cfg.master_seed = args.seed
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        cells = pipeline.parse_cells(getattr(args, "cells", None), cfg.pretrain.cells)

        if args.command == "syngen":
            stats = pipeline.run_syngen(cfg, out)
            for name, st in stats.items():
                print(f"{name}: n={st['n']} age {st['age_median']:.0f} "
                      f"[{st['age_q1']:.0f}, {st['age_q3']:.0f}] "
                      f"male {100 * st['male_fraction']:.2f}% "
                      f"outcome {100 * st['outcome_fraction']:.2f}%")
        elif args.command == "pretrain":
            held_out = pipeline.run_pretrain(cfg, out, cells)
            for cell, mse in held_out.items():
                print(f"{cell}: held-out MSE {mse:.6f}")
        elif args.command == "embed":
            for path in pipeline.run_embed(cfg, out, cells):
                print(path)
        elif args.command == "downstream":
            results = pipeline.run_downstream(cfg, out, cells)
            for result in results:
                print(pipeline.render_report(result))
        elif args.command == "tsne":
            for path in pipeline.run_tsne(cfg, out, cells):
                print(path)
        elif args.command == "report":
            print(pipeline.run_report(cfg, out))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DemrepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
