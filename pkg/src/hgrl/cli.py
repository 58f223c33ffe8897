"""Command-line entry point: ``hgrl {synth,train,eval,inspect,sweep}``.

Exit codes: 0 success, 1 usage or config error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .config import ConfigError, PipelineConfig, load_config
from .dataio import DatasetError, SyntheticSpec, generate_synthetic, make_label_mask, write_dataset
from .pipeline import INSPECT_TARGETS, StageError, evaluate, inspect, run_pipeline, sweep

EXIT_USAGE = 1
EXIT_STAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for stage failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat JSON config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   dest="overrides", help="override one config key (repeatable)")
    p.add_argument("--out", metavar="DIR", help="output directory (config key out_dir)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--dataset", metavar="DIR", help="dataset directory (config key dataset_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hgrl", description="Heterogeneous graph learning for multivariate time series.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--seed", type=int, default=0)
    defaults = SyntheticSpec()
    for f in fields(SyntheticSpec):
        if f.name == "seed":
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                       type=type(getattr(defaults, f.name)), default=getattr(defaults, f.name))
    p.add_argument("--label-fraction", type=float,
                   help="also write mask.csv with this stratified labeled fraction")

    p = sub.add_parser("train", help="run the full pipeline")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="recompute accuracy from saved artifacts")
    p.add_argument("artifacts", metavar="ARTIFACTS_DIR")
    p.add_argument("--dataset", metavar="DIR", help="dataset directory (default: the one in config.json)")

    p = sub.add_parser("inspect", help="export plot-ready tables")
    p.add_argument("artifacts", metavar="ARTIFACTS_DIR")
    p.add_argument("what", choices=INSPECT_TARGETS)
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("sweep", help="run train once per value of one config key")
    _add_config_flags(p)
    p.add_argument("--key", required=True)
    p.add_argument("--values", required=True,
                   help='JSON list (e.g. "[32, 64, 128]") or comma-separated values')
    return parser


def parse_values(text: str) -> list:
    text = text.strip()
    if text.startswith("["):
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--values: {exc}") from exc
    else:
        values = []
        for item in filter(None, (t.strip() for t in text.split(","))):
            try:
                values.append(json.loads(item))
            except json.JSONDecodeError:
                values.append(item)
    if not values:
        raise UsageError("--values must name at least one value")
    return values


def _config(args) -> PipelineConfig:
    return load_config(args.config, args.overrides, out_dir=args.out, seed=args.seed,
                       dataset_dir=args.dataset)


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(**{f.name: getattr(args, f.name) for f in fields(SyntheticSpec)})
    ds = generate_synthetic(spec)
    if args.label_fraction is not None:
        ds = ds.with_mask(make_label_mask(ds, args.label_fraction, spec.seed))
    write_dataset(ds, args.out, write_mask=args.label_fraction is not None)
    print(args.out)
    return 0


def _cmd_train(args) -> int:
    cfg = _config(args)
    if not cfg.dataset_dir:
        raise UsageError("no dataset: pass --dataset or set dataset_dir in the config")
    art = run_pipeline(cfg)
    print(json.dumps({"accuracy": art.metrics["accuracy"], "out_dir": art.out_dir}))
    return 0


def _cmd_eval(args) -> int:
    print(json.dumps(evaluate(args.artifacts, args.dataset), sort_keys=True))
    return 0


def _cmd_inspect(args) -> int:
    for path in inspect(args.artifacts, args.what, args.out):
        print(path)
    return 0


def _cmd_sweep(args) -> int:
    values = parse_values(args.values)
    cfg = _config(args)
    if not cfg.dataset_dir:
        raise UsageError("no dataset: pass --dataset or set dataset_dir in the config")
    for row in sweep(cfg, args.key, values):
        print(json.dumps({args.key: row["value"], "accuracy": row["accuracy"]}))
    return 0


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval,
            "inspect": _cmd_inspect, "sweep": _cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:          # --help or a usage error
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"hgrl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, DatasetError, OSError) as exc:
        print(f"hgrl: stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
