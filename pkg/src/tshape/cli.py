"""Command line entry point: ``tshape <command> --config FILE [--seed N] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .evaluation import METRICS, compare
from .pipeline import STAGES, StageError, run_pipeline, sensitivity_sweep
from .synth import SynthError, generate_synthetic, write_synthetic

EXIT_CONFIG = 2
EXIT_STAGE = 3

_STAGE_COMMANDS = {
    "ingest": "corpus",
    "skills": "skills",
    "label": "labels",
    "embed": "embed",
    "train": "train",
    "rank": "rank",
    "eval": "eval",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override every module seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set model.n=50 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tshape", description="T-shaped expert finding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in _STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the pipeline through the {stage} stage")
        _common(p)
        if name == "ingest":
            p.add_argument("input", nargs="?", help="Posts.xml or JSONL file (overrides paths.corpus)")
    p = sub.add_parser("synth", help="write a synthetic corpus and its planted truth")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p = sub.add_parser("sweep", help="sensitivity sweep over n or the cutoff R")
    _common(p)
    p.add_argument("--parameter", choices=("n", "R"))
    p.add_argument("--values", help="comma-separated positive integers")
    p.add_argument("--cutoff", type=int, default=10, help="cutoff reported for an n sweep")
    p = sub.add_parser("report", help="evaluate (from cache when possible) and publish the report")
    _common(p)
    p = sub.add_parser("run", help="run every stage and publish the report")
    _common(p)
    return parser


def _print_status(pipe) -> None:
    for stage in STAGES:
        if stage in pipe.status:
            print(f"{stage:<7} {pipe.status[stage]:<9} {pipe.keys[stage]}")


def _print_summary(tables, cutoff: int = 10) -> None:
    by_name = {t.system: t for t in tables}
    for t in tables:
        vals = "  ".join(f"{m}@{cutoff}={t.macro(m, cutoff):.4f}" for m in METRICS if cutoff in t.cutoffs)
        print(f"{t.system:<7} {vals}")
    if "cnn" in by_name and "random" in by_name and cutoff in by_name["cnn"].cutoffs:
        res = compare(by_name["cnn"], by_name["random"], "ndcg", cutoff)
        print(f"paired t-test cnn vs random ndcg@{cutoff}: t={res.t_statistic:.4f} df={res.degrees_of_freedom} "
              f"p={res.p_value:.4g} significant={res.significant}")


def _parse_values(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.command == "ingest" and args.input:
        overrides.append(f"paths.corpus={args.input}")
    try:
        cfg = load_config(args.config, overrides, args.seed)
        if args.command == "synth":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_synthetic(generate_synthetic(cfg.synth), out / "corpus.jsonl", out / "truth.csv")
            print(f"wrote {out / 'corpus.jsonl'} and {out / 'truth.csv'}")
            return 0
        if args.command == "sweep":
            parameter = args.parameter or cfg.sweep.parameter
            values = _parse_values(args.values) or list(cfg.sweep.values)
            rows = sensitivity_sweep(cfg, parameter, values, args.cutoff)
            for r in rows:
                print(f"{r[0]}={r[1]:<6} {r[2]:<7} {r[3]}@{r[4]}={r[5]:.4f}")
            return 0
        until = _STAGE_COMMANDS.get(args.command, "eval")
        publish = args.command in ("eval", "report", "run")
        pipe, art = run_pipeline(cfg, until, publish=publish)
        _print_status(pipe)
        if "tables" in art:
            _print_summary(art["tables"])
            print(f"report written to {cfg.paths.output_dir}")
        return 0
    except (ConfigError, SynthError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
