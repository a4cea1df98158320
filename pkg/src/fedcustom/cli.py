"""Command-line entry point: ``run``, ``suite``, ``plotdata``, ``gencorpus``."""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from .errors import FedCustomError, ValidationError
from .harness import (OUT_ENV, ExperimentConfig, emit_plotdata, generate_corpus_files,
                      output_root, run_experiment, run_suite)


def recipe_path(name: str) -> Path:
    """Path of a bundled recipe (``base`` -> recipes/base.cfg)."""
    return Path(str(resources.files("fedcustom") / "recipes" / f"{name}.cfg"))


def _load(path: str, args) -> ExperimentConfig:
    p = Path(path)
    if not p.exists() and recipe_path(path).exists():
        p = recipe_path(path)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return ExperimentConfig.load(p, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedcustom", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, seed=True):
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    common(p)
    p = sub.add_parser("suite", help="run a named table suite over seeds 1,2,3")
    p.add_argument("name", choices=["table2", "table3", "table4", "table5"])
    p.add_argument("--config", help="base config the suite recipes are layered on")
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")])
    common(p, seed=False)
    p = sub.add_parser("plotdata", help="CSV of (round, val_loss, bleu) from round logs")
    p.add_argument("dir")
    p.add_argument("-o", "--output", help="write CSV here instead of stdout")
    p = sub.add_parser("gencorpus", help="write the synthetic corpus splits as TSV")
    p.add_argument("config")
    common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            cfg = _load(args.config, args)
            res = run_experiment(cfg, out=args.out)
            print(f"{res.run_dir}\t{res.summary.get('status')}\tbleu={res.summary.get('bleu')}")
            return res.status
        if args.cmd == "suite":
            base = _load(args.config, argparse.Namespace(override=[], seed=None)) if args.config else None
            kw = {"seeds": args.seeds} if args.seeds else {}
            res = run_suite(args.name, out=args.out, overrides=args.override, base=base, **kw)
            print(res.csv_path.read_text(encoding="utf-8"), end="")
            return res.status
        if args.cmd == "plotdata":
            text = emit_plotdata(args.dir, args.output)
            if args.output is None:
                sys.stdout.write(text)
            return 0
        if args.cmd == "gencorpus":
            cfg = _load(args.config, args)
            out = output_root(args.out, cfg) / f"corpus-{cfg['corpus.seed']}"
            for p in generate_corpus_files(cfg, out):
                print(p)
            return 0
    except ValidationError as exc:
        print(exc, file=sys.stderr)
        return 2
    except FedCustomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
