"""Command-line entry point: ``mtlb run|sweep|mnist|selftest``.

Exit codes: 0 success, 2 config error, 3 runtime/numerical failure, 4 I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .errors import FormatError, InvalidArgumentError, MtlbError
from .harness import OutputError, run, sweep, write_csv, write_summary
from .selftest import run_selftest

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
DEFAULT_TASKS = [5, 10, 25, 50, 100]
MNIST_ALS = {"restarts": 1, "max_iters": 50}


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _digit_range(text):
    try:
        if "-" in text:
            lo, hi = (int(x) for x in text.split("-"))
            digits = list(range(lo, hi + 1))
        else:
            digits = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad digit range {text!r}")
    if len(digits) < 2 or not set(digits) <= set(range(10)):
        raise argparse.ArgumentTypeError(f"digit range {text!r} must name two or more digits in 0-9")
    return digits


def _report(summary):
    print(json.dumps({
        "algo": summary.config["algo"],
        "seed": summary.seed,
        "final_regret_total": summary.final_regret_total,
        "final_regret_per_task": summary.final_regret_per_task,
        "wall_time": round(summary.wall_time, 3),
    }))


def _run_seeds(config: ExperimentConfig, seeds, out):
    ledgers = []
    for seed in seeds:
        ledger, summary = run(config, seed)
        ledgers.append(ledger)
        _report(summary)
    if out:
        write_csv(ledgers, out)


def cmd_run(args):
    config = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else config.seeds
    _run_seeds(config, seeds, args.out or config.out_path)


def cmd_sweep(args):
    config = load_config(args.config)
    base = config.seeds[0]
    seeds = [(base + i) % 2**64 for i in range(args.seeds)]
    tasks = args.tasks
    if tasks is None and config.setting != "mnist":
        tasks = DEFAULT_TASKS
    table = sweep(config, tasks, args.ranks, seeds, out_dir=args.out)
    if args.out is None:
        write_summary(table, "/dev/stdout")
    failed = [row for row in table if row["status"] != "ok"]
    for row in failed:
        print(f"cell T={row['T']} k={row['k']} {row['algo']} seed={row['seed']}: {row['status']}",
              file=sys.stderr)
    print(f"{len(table) - len(failed)}/{len(table)} runs ok", file=sys.stderr)


def cmd_mnist(args):
    try:
        config = ExperimentConfig.model_validate({
            "setting": "mnist", "algo": args.algo, "N": args.N, "k": args.k,
            "seeds": [args.seed],
            "mnist": {"images": args.images, "labels": args.labels, "digits": args.digits,
                      "pca_dim": args.pca_dim},
            "als": {"restarts": args.als_restarts, "max_iters": args.als_iters},
        })
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    _run_seeds(config, config.seeds, args.out)


def cmd_selftest(args):
    if not run_selftest(draws=args.draws, instances=args.instances):
        raise MtlbError("selftest failed")


def build_parser():
    parser = argparse.ArgumentParser(prog="mtlb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configured experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="treatment vs baseline over tasks x ranks x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", type=_int_list, help=f"default {DEFAULT_TASKS}; omit for mnist")
    p.add_argument("--ranks", type=_int_list, default=[2, 4])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mnist", help="pairwise-digit MNIST bandit")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--digits", type=_digit_range, default=list(range(10)))
    p.add_argument("--algo", choices=["mlin_greedy", "independent_greedy"], default="mlin_greedy")
    p.add_argument("--out")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--N", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pca-dim", type=int, dest="pca_dim")
    # 784-dimensional pixels make each ALS sweep costly; one short restart per refit
    p.add_argument("--als-restarts", type=int, default=MNIST_ALS["restarts"])
    p.add_argument("--als-iters", type=int, default=MNIST_ALS["max_iters"])
    p.set_defaults(func=cmd_mnist)

    p = sub.add_parser("selftest", help="sphere-moment and ALS-oracle checks")
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OutputError, FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MtlbError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
