"""Command line entry point: ``tqc-lab train|toy|check``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

from tqc_lab import bias_lab
from tqc_lab.errors import InvalidArgumentError, NumericError
from tqc_lab.selfcheck import run_checks
from tqc_lab.trainer import TrainConfig, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _tuple_arg(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value file; flags override it")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        conv = _tuple_arg if kind is tuple else kind
        p.add_argument(flag, dest=f.name, type=conv, default=None, help=f"default: {f.default}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tqc-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="train an agent and write CSV artifacts")
    _add_train_flags(tr)
    tr.add_argument("--quiet", action="store_true")

    toy = sub.add_parser("toy", help="single-state bias sweeps")
    toy.add_argument("--method", choices=["avg", "min", "tqc", "all"], default="all")
    toy.add_argument("--seeds", type=int, default=bias_lab.ToyConfig().seeds)
    toy.add_argument("--first-seed", type=int, default=0)
    toy.add_argument("--iterations", type=int, default=bias_lab.ToyConfig().iterations)
    toy.add_argument("--search", choices=["dense", "refine"], default="dense")
    toy.add_argument("--workers", type=int, default=1)
    toy.add_argument("--out", type=Path, default=Path("runs"))

    chk = sub.add_parser("check", help="gradient and property self-tests")
    chk.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name) is not None}
    config = load_config(args.config, **overrides) if args.config else TrainConfig(**overrides)

    def progress(step, row, info):
        if not args.quiet:
            alpha = f" alpha={info.alpha:.4f}" if info is not None else ""
            print(f"step={step} eval_mean={row['eval_mean']:.4f}{alpha}", flush=True)

    try:
        art = train(config, progress=progress)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"run_dir={art.run_dir}")
    return EXIT_OK


def _cmd_toy(args) -> int:
    if args.seeds < 1 or args.iterations < 1 or args.workers < 1:
        raise InvalidArgumentError("--seeds, --iterations and --workers must be positive")
    config = bias_lab.ToyConfig(iterations=args.iterations, seeds=args.seeds, bootstrap_search=args.search)
    seeds = range(args.first_seed, args.first_seed + args.seeds)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    out = args.out / f"toy-seed{args.first_seed}-n{args.seeds}-{stamp}"
    families = ["avg", "min", "tqc"] if args.method == "all" else [args.method]
    for family in families:
        rows = bias_lab.run_sweep(
            family, seeds, config, workers=args.workers,
            progress=lambda fam, seed: print(f"{fam} seed={seed} done", flush=True),
        )
        bias_lab.write_sweep_csvs(rows, out)
        for row in rows:
            print(f"{row.family} param={row.param} mean_delta={row.mean_delta:.4f} "
                  f"var_delta={row.var_delta:.4f} argmax_distance={row.argmax_distance:.4f}")
    print(f"out_dir={out}")
    return EXIT_OK


def _cmd_check(args) -> int:
    results = run_checks(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}" + (f" ({r.detail})" if r.detail else ""))
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed} passed, {failed} failed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        handler = {"train": _cmd_train, "toy": _cmd_toy, "check": _cmd_check}[args.command]
        return handler(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (InvalidArgumentError, OSError) as exc:
        print(f"tqc-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
