"""Command line: ``python -m lcfl <subcommand>`` (also installed as ``lcfl``).

Exit codes: 0 success, 1 a verifier property failed, 2 invalid input or a
run error (message on stderr).
"""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ConfigError, LcflError
from . import runner
from .config import PROFILES, load_config, load_yaml, parse_verify


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("need at least one seed, all >= 0")
    return seeds


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _add_source(p: argparse.ArgumentParser, multiple: bool = False) -> None:
    if multiple:
        p.add_argument("--config", action="append", default=[], metavar="PATH", help="experiment config (repeatable)")
        p.add_argument("--profile", action="append", default=[], choices=PROFILES,
                       help="shipped desk-scale profile (repeatable)")
        return
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", metavar="PATH", help="experiment config (YAML)")
    g.add_argument("--profile", choices=PROFILES, help="shipped desk-scale profile")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed-override", type=_seed_list, metavar="S[,S...]",
                   help="replace the config's seed list")
    p.add_argument("--output-dir", metavar="DIR", help="replace the config's output directory")
    p.add_argument("--threads", type=_positive, metavar="N",
                   help=f"worker threads across seeds (default ${runner.THREADS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lcfl", description="Clustered federated learning experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every algorithm of a config over its seeds")
    _add_source(p)
    _add_common(p)
    p.add_argument("--no-resume", action="store_true", help="ignore completion markers and recompute")

    p = sub.add_parser("compare", help="mean±std accuracy table across algorithms")
    _add_source(p, multiple=True)
    _add_common(p)
    p.add_argument("--iterations", type=_seed_list, required=True, metavar="I[,I...]",
                   help="global iterations to tabulate, e.g. 5,10,15,30")
    p.add_argument("--output", metavar="CSV", help="also write the table here")

    p = sub.add_parser("verify", help="numerical checks of the loss-gap bounds")
    p.add_argument("--config", metavar="PATH", help="verifier config (defaults built in)")
    p.add_argument("--output-dir", metavar="DIR")
    p.add_argument("--threads", type=_positive, metavar="N", help="accepted for symmetry; checks run serially")

    p = sub.add_parser("gen-data", help="materialize a federation to disk")
    _add_source(p)
    _add_common(p)

    p = sub.add_parser("inspect-matrix", help="print a client distance matrix after warm-up")
    _add_source(p)
    _add_common(p)
    p.add_argument("--metric", choices=("loss-gap", "param-norm", "grad-cosine"))
    p.add_argument("--digits", type=int, default=4)
    return ap


def _configs(args, multiple=False):
    out = getattr(args, "output_dir", None)
    seeds = getattr(args, "seed_override", None)
    if not multiple:
        if args.profile is not None:
            return load_config(profile=args.profile, output_dir=out, seeds=seeds)
        return load_config(args.config, output_dir=out, seeds=seeds)
    sources = [(p, None) for p in args.config] + [(None, p) for p in args.profile]
    if not sources:
        raise ConfigError("config", "give at least one --config or --profile")
    if out is not None and len(sources) > 1:
        raise ConfigError("output_dir", "--output-dir needs a single config or profile")
    cfgs = []
    for path, prof in sources:
        cfgs.extend(load_config(path, profile=prof, output_dir=out, seeds=seeds))
    return cfgs


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            for out in runner.run(_configs(args), args.threads, resume=not args.no_resume):
                print(out / "summary.csv")
            return 0
        if args.command == "compare":
            sys.stdout.write(runner.compare(_configs(args, multiple=True), args.iterations, args.threads,
                                            args.output))
            return 0
        if args.command == "verify":
            doc = load_yaml(args.config) if args.config else None
            return runner.verify(parse_verify(doc, args.output_dir))
        cfg = _configs(args)[0]
        seed = (args.seed_override or cfg.seeds)[0]
        if args.command == "gen-data":
            print(runner.gen_data(cfg, seed, args.output_dir or f"{cfg.output_dir}/data_seed{seed}"))
            return 0
        sys.stdout.write(runner.inspect_matrix(cfg, seed, args.metric, args.digits))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (LcflError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
