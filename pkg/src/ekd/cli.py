"""Command line entry point: ``ekd run|sweep|report|inspect-model|parse-check``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import load_config
from .exceptions import EKDError
from .experiments import AXES, load_records, run_experiment, sweep
from .models import STANDARD_DEPTHS, ModelSpec, compnet, count_flops, count_params
from .reports import KINDS, emit_report

log = logging.getLogger("ekd")


def _cmd_run(args):
    config = load_config(args.config)
    if args.output_dir:
        config = config.replace(output_dir=args.output_dir)
    records = run_experiment(config, args.run_dir)
    for r in records:
        print(f"{r.run_id}\tseed={r.seed}\t{r.variant}\tacc={r.accuracy:.4f}")
    return 0


def _cmd_sweep(args):
    config = load_config(args.config)
    if args.output_dir:
        config = config.replace(output_dir=args.output_dir)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    values = [float(v) if args.axis == "data_fraction" else int(v) for v in values]
    records = sweep(config, args.axis, values, args.run_dir)
    for r in records:
        x = r.data_fraction if args.axis == "data_fraction" else r.ensemble_size
        print(f"{args.axis}={x}\tseed={r.seed}\t{r.variant}\tacc={r.accuracy:.4f}")
    return 0


def _cmd_report(args):
    records = load_records(args.paths)
    for path in emit_report(records, args.kind, args.out, args.precision):
        print(path)
    return 0


def _cmd_inspect(args):
    shape = (args.image_size, args.image_size, 3)
    depths = args.depth or list(STANDARD_DEPTHS)
    print("model\tbranches\tparams\tparams_M\tflops\tflops_M")
    for depth in depths:
        spec = ModelSpec(depth, args.num_classes)
        for n in args.branches:
            net = compnet(spec, n)
            p, f = count_params(net), count_flops([spec] * n, shape)
            print(f"ResNet{depth}\t{n}\t{p}\t{p / 1e6:.2f}\t{f}\t{f / 1e6:.2f}")
    return 0


def _parse_file(path, fmt, label_mode):
    raw = Path(path).read_bytes()
    if fmt == "cifar10":
        return data_mod.parse_cifar10(raw)
    return data_mod.parse_cifar100(raw, label_mode)


def _cmd_parse_check(args):
    paths = []
    for p in map(Path, args.paths):
        paths.extend(sorted(p.glob("*.bin")) if p.is_dir() else [p])
    if not paths:
        print("no .bin files found", file=sys.stderr)
        return 1
    total = None
    for p in paths:
        ds = _parse_file(p, args.format, args.label_mode)
        counts = ds.class_counts()
        total = counts if total is None else total + counts
        print(f"{p}\trecords={len(ds)}\tclasses={ds.num_classes}")
    summary = {"records": int(total.sum()), "per_class": total.tolist(),
               "balanced": bool(np.all(total == total[0]))}
    print(json.dumps(summary))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ekd", description="Ensemble knowledge distillation experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="pretrain teachers, train EKD, evaluate, persist metrics")
    p.add_argument("config", help="key = value experiment config file")
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.add_argument("--run-dir", help="exact run directory (default: OUTPUT_DIR/NAME-HASH)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run the config once per value of one axis")
    p.add_argument("config")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", required=True, help="comma separated, e.g. 0.1,0.25,0.5,1.0")
    p.add_argument("--output-dir")
    p.add_argument("--run-dir", help="sweep root directory (default: OUTPUT_DIR/SWEEP_ID)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="render tables or figures from metrics.jsonl files")
    p.add_argument("paths", nargs="+", help="run/sweep directories or metrics.jsonl files")
    p.add_argument("--kind", choices=KINDS, default="table")
    p.add_argument("--out", required=True, help="output path (figures also write a .tsv beside it)")
    p.add_argument("--precision", type=int, default=2, help="decimals for accuracy (default 2)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("inspect-model", help="parameter and FLOP table for CIFAR ResNets")
    p.add_argument("--depth", type=int, action="append", help="repeatable; default: depths 8 to 110")
    p.add_argument("--branches", type=lambda s: [int(x) for x in s.split(",")], default=[1],
                   help="comma separated branch counts (default 1)")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("parse-check", help="validate CIFAR binary files and print class histograms")
    p.add_argument("paths", nargs="+", help=".bin files or directories of them")
    p.add_argument("--format", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--label-mode", choices=("fine", "coarse"), default="fine")
    p.set_defaults(func=_cmd_parse_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (EKDError, OSError, ValueError) as exc:
        print(f"ekd {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
