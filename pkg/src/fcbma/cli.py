"""Command-line entry point: ``fcbma run|synth|validate-config|enumerate``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import DataError
from .partition import ConstraintSet, PartitionError, PartitionSpace, bell, log10_space_size
from .pipeline import PipelineError, load_data, run, stderr_progress


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="top-level random seed")
    p.add_argument("--threads", type=int, default=None, help="parallel model fits")
    p.add_argument("--output-dir", default=None, help="directory for output files")
    return p


def _pair(text: str) -> tuple[str, str]:
    parts = [x.strip() for x in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LEVEL,LEVEL, got {text!r}")
    return parts[0], parts[1]


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fcbma", description="Factor collapsing with BIC model averaging.")
    sub = parser.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", parents=[common], help="run a configured search and write reports")
    r.add_argument("config")
    r.add_argument("--quiet", action="store_true", help="suppress progress records on stderr")

    s = sub.add_parser("synth", parents=[common], help="simulate a portfolio with known collapsing")
    s.add_argument("spec", help="YAML generator parameters")
    s.add_argument("--name", default="synth", help="output file stem")

    v = sub.add_parser("validate-config", parents=[common], help="check a configuration and its data")
    v.add_argument("config")
    v.add_argument("--no-data", action="store_true", help="skip reading the input file")

    e = sub.add_parser("enumerate", parents=[common], help="inspect partition spaces")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--levels", type=int, help="number of levels of a single factor")
    src.add_argument("--config", help="report the spaces of a run configuration")
    e.add_argument("--must-link", type=_pair, action="append", default=[], metavar="A,B",
                   help="1-based level pair forced into one block")
    e.add_argument("--cannot-link", type=_pair, action="append", default=[], metavar="A,B",
                   help="1-based level pair kept apart")
    e.add_argument("--consecutive", action="store_true", help="only runs of adjacent levels")
    e.add_argument("--list", action="store_true", help="print every partition")
    e.add_argument("--limit", type=int, default=None, help="stop listing after this many")
    return parser


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    try:
        manifest = run(cfg, args.output_dir, None if args.quiet else stderr_progress)
    except PipelineError as exc:
        sys.stderr.write(json.dumps({"event": "error", "stage": exc.stage, "message": str(exc)}) + "\n")
        return 1
    _emit({k: manifest[k] for k in ("status", "ensemble_size", "visited", "outputs")})
    return 0


def _cmd_synth(args) -> int:
    from .synth import SynthSpec, write

    spec = SynthSpec.load(args.spec)
    csv_path, truth_path = write(spec, args.seed or 0, args.output_dir or ".", args.name)
    _emit({"data": str(csv_path), "truth": str(truth_path)})
    return 0


def _cmd_validate(args) -> int:
    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    report = {"config_sha256": cfg.digest(), "factors": list(cfg.factor_names),
              "collapsed": list(cfg.collapsed), "family": cfg.family}
    if not args.no_data:
        data = load_data(cfg)
        template = cfg.template(dict(data.levels))
        spaces = template.spaces(data, cfg.collapsed)
        report["rows"] = data.n_rows
        report["space_sizes"] = {f: s.size for f, s in spaces.items()}
        report["log10_product_space"] = log10_space_size(list(spaces.values()))
    _emit({"valid": True, **report})
    return 0


def _cmd_enumerate(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        data = load_data(cfg)
        spaces = cfg.template(dict(data.levels)).spaces(data, cfg.collapsed)
        _emit({"space_sizes": {f: s.size for f, s in spaces.items()},
               "log10_product_space": log10_space_size(list(spaces.values()))})
        return 0
    n = args.levels
    to_int = lambda pairs: [(int(a), int(b)) for a, b in pairs]  # noqa: E731
    try:
        cs = ConstraintSet.from_one_based(to_int(args.must_link), to_int(args.cannot_link), args.consecutive)
    except ValueError as exc:
        raise PartitionError(f"constraint pairs must be 1-based level numbers: {exc}") from None
    space = PartitionSpace(n, cs)
    _emit({"levels": n, "bell": bell(n), "admissible": space.size})
    if args.list or args.output_dir:
        rows = []
        for i, p in enumerate(space):
            if args.limit is not None and i >= args.limit:
                break
            rows.append((p.graycode(), p.set_notation()))
        if args.output_dir:
            out = Path(args.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "partitions.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["graycode", "partition"])
                w.writerows(rows)
        if args.list:
            for g, s in rows:
                sys.stdout.write(f"{g}\t{s}\n")
    return 0


COMMANDS = {"run": _cmd_run, "synth": _cmd_synth, "validate-config": _cmd_validate, "enumerate": _cmd_enumerate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, DataError, PartitionError, ValueError) as exc:
        sys.stderr.write(json.dumps({"event": "error", "verb": args.verb, "message": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
