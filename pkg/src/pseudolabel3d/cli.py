"""pseudolabel3d command line: gen / train-votenet / run / sweep / report.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .cbv import TrainingDivergedError
from .evaluation import format_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--workers", type=int, help="frame-level worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pseudolabel3d", description="Pseudo-label generation experiments on the synthetic detector.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write evaluation and labelled scene sets")
    g.add_argument("--scenes", type=int, help="number of evaluation scenes")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    sub.add_parser("train-votenet", parents=[common], help="train the box-voting network on labelled scenes")

    for name, text in (("run", "evaluate pipeline variants"), ("sweep", "score-threshold sweep of one variant")):
        r = sub.add_parser(name, parents=[common], help=text)
        r.add_argument("--variant", choices=ex.VARIANTS + ("all",), help="pipeline variant (default all for run, ste for sweep)")
        r.add_argument("--threshold", type=float, help="score cut for the chosen variant")

    rep = sub.add_parser("report", parents=[common], help="print metrics.csv as a table")
    rep.add_argument("--metrics", type=Path, help="metrics file (default OUT/metrics.csv)")
    return p


def resolve_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    overrides = {}
    for flag, key in (("seed", "seed"), ("out", "out"), ("workers", "workers"), ("variant", "variant"), ("threshold", "threshold"), ("scenes", "n_scenes")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _report(cfg: ex.ExperimentConfig, path: Path | None) -> str:
    path = path or cfg.out_dir / "metrics.csv"
    if not path.exists():
        raise ex.MissingInputError(f"{path} not found; run `pseudolabel3d run` first")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("recall", "precision"):
            r[k] = f"{100 * float(r[k]):.1f}" if r[k] else "undef"
    return format_table(rows, ex.METRIC_COLUMNS)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen":
            paths = ex.cmd_gen(cfg, force=args.force)
            print(json.dumps({k: str(v) for k, v in paths.items()}))
        elif args.command == "train-votenet":
            print(ex.cmd_train_votenet(cfg))
        elif args.command == "run":
            paths = ex.cmd_run(cfg)
            print(_report(cfg, paths["metrics"]))
        elif args.command == "sweep":
            print(ex.cmd_sweep(cfg))
        elif args.command == "report":
            print(_report(cfg, args.metrics))
    except ex.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergedError, FloatingPointError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
