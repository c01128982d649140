"""Command-line entry point.

Subcommands: gen-data, train-dem1, train-dem2, train-stack, eval, ablate.
Exit codes: 0 success, 2 config error, 3 missing prerequisite,
4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import sys

from .config import parse_config
from .errors import (ConfigError, MissingPrerequisiteError,
                     NumericalFailureError, OfohError)
from . import pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4

VERBS = ("gen-data", "train-dem1", "train-dem2", "train-stack", "eval",
         "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ofoh",
        description="Occlusion-robust ensemble re-identification pipeline",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory")
        p.add_argument("--profile", choices=["desk", "paper"], default=None)
        p.add_argument("--attention", choices=["softmax", "sparsemax"],
                       default=None)
        p.add_argument("--mae", choices=["on", "off"], default=None)
        p.add_argument("--verifier", choices=["on", "off"], default=None)
        p.add_argument("--lambda-div", dest="lambda_div", type=float,
                       default=None)
        p.add_argument("--cosine", action="store_true", default=False,
                       help="L2-normalize embeddings before distances")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in ("seed", "out", "profile", "attention", "mae", "verifier",
                "lambda_div"):
        value = getattr(args, key)
        if value is not None:
            out[key] = value
    if args.cosine:
        out["cosine"] = "on"
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, _overrides(args))
        if args.verb == "gen-data":
            manifest = pipeline.run_gen_data(cfg)
            pipeline.prepare_run_dir(cfg)
            print(f"wrote {manifest['n_records']} records to "
                  f"{cfg.resolved_dataset_dir()}")
            print(f"identifiability floor rank-1: "
                  f"{float(manifest['identifiability_rank1']):.4f} "
                  f"(chance {float(manifest['identifiability_chance']):.4f})")
        elif args.verb == "train-dem1":
            path = pipeline.run_train_dem1(cfg)
            print(f"dem1 checkpoint: {path}")
        elif args.verb == "train-dem2":
            path = pipeline.run_train_dem2(cfg)
            print(f"dem2 checkpoint: {path}")
        elif args.verb == "train-stack":
            path = pipeline.run_train_stack(cfg)
            print(f"stack checkpoint: {path}")
        elif args.verb == "eval":
            results = pipeline.run_eval(cfg)
            print("model\trank1\trank5\tmap")
            for model in pipeline.MODELS:
                r = results[model]
                print(f"{model}\t{r['rank1']:.4f}\t{r['rank5']:.4f}"
                      f"\t{r['map']:.4f}")
        elif args.verb == "ablate":
            results = pipeline.ablate(cfg)
            for table, rows in results.items():
                print(f"[{table}]")
                for row in rows:
                    print("\t".join(str(v) for v in row))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except NumericalFailureError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OfohError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
