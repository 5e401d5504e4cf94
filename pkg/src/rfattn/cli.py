"""Command-line entry points for the experiment harness.

Each subcommand mirrors one runner in :mod:`rfattn.harness`.  Settings come
from per-flag arguments, or from a ``--config`` file of ``key=value`` lines;
explicit flags override the file.  Because every emitted CSV echoes its full
configuration as ``# key=value`` comments, a previous result file can itself
be passed to ``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .csvio import config_from_strings, read_config_comments
from .harness import (
    ErrorBudgetConfig,
    GradCheckConfig,
    StabilityConfig,
    TimingConfig,
    ToyTrainConfig,
    VarianceSweepConfig,
    gen_synthetic,
    run_error_vs_budget,
    run_grad_check,
    run_stability_sweep,
    run_timing_bench,
    run_toy_train,
    run_variance_sweep,
    run_whiten,
)

_FIELD_HELP = {
    "lam_spec": "covariance spec: isotropic:<c> | diagonal:<v,...> | random_spd:<seed>,<cond>",
    "lam_specs": "';'-separated list of covariance specs",
    "d": "input dimension",
    "length": "sequence length L",
    "m": "feature count",
    "m_grid": "comma-separated feature counts",
    "l_grid": "comma-separated sequence lengths",
    "trials": "Monte Carlo trials per cell",
    "n_est": "sample count for the plug-in covariance estimate",
    "shrinkage": "isotropic shrinkage weight in [0, 1]",
    "seed": "base seed; all streams derive from it",
    "seeds": "number of seed replicates",
    "out": "output CSV path",
    "steps": "gradient steps per run",
    "lr": "learning rate for the covariance factor",
    "lfk_lr": "learning rate for the learned-projection baseline",
    "lr_base": "smallest learning rate of the stability grid",
    "lr_points": "number of log-spaced learning rates spanning 10x",
    "learn_steps": "training steps for the learned dark proposal",
    "learn_lr": "learning rate for the learned dark proposal",
    "learn_m": "feature count used while learning the dark proposal",
    "reps": "timed repetitions per cell (median is reported)",
    "warmup": "discarded warmup calls per cell",
    "rank": "rank r of the factor in the gradient check",
    "resample_draws": "redraw the feature projections every step (default) or freeze them",
    "fd_eps": "central-difference step",
    "threshold": "pass threshold on the relative discrepancy",
}


def _add_config_flags(parser: argparse.ArgumentParser, cls) -> None:
    parser.add_argument("--config", help="key=value file (or previous output CSV) with settings")
    for field in dataclasses.fields(cls):
        flag = "--" + field.name.replace("_", "-")
        parser.add_argument(flag, dest=field.name, metavar="V", help=_FIELD_HELP.get(field.name, field.name))


def _build_config(args: argparse.Namespace, cls):
    mapping: dict[str, str] = {}
    if args.config:
        file_map = read_config_comments(args.config)
        names = {f.name for f in dataclasses.fields(cls)}
        mapping.update({k: v for k, v in file_map.items() if k in names})
    for field in dataclasses.fields(cls):
        value = getattr(args, field.name, None)
        if value is not None:
            mapping[field.name] = value
    return config_from_strings(cls, mapping)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rfattn", description="Random-feature attention experiment harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic Q/K/V batch as CSV")
    p_gen.add_argument("--lam-spec", default="isotropic:1.0", help=_FIELD_HELP["lam_spec"])
    p_gen.add_argument("--length", type=int, default=128, help=_FIELD_HELP["length"])
    p_gen.add_argument("--d", type=int, default=4, help=_FIELD_HELP["d"])
    p_gen.add_argument("--seed", type=int, default=0, help=_FIELD_HELP["seed"])
    p_gen.add_argument("--out", required=True, help=_FIELD_HELP["out"])

    for name, cls, help_text in (
        ("variance-sweep", VarianceSweepConfig, "expected-variance comparison of proposals"),
        ("error-vs-budget", ErrorBudgetConfig, "attention error across feature budgets"),
        ("timing", TimingConfig, "runtime scaling benchmark (rf vs exact)"),
        ("toy-train", ToyTrainConfig, "toy attention-matching training comparison"),
        ("stability", StabilityConfig, "learning-rate stability sweep"),
        ("grad-check", GradCheckConfig, "finite-difference gradient verification"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p, cls)

    p_whiten = sub.add_parser("whiten", help="estimate input covariance and emit a whitening factor")
    p_whiten.add_argument("--data", required=True, help="QKV CSV produced by 'gen'")
    p_whiten.add_argument("--shrinkage", type=float, default=0.0, help=_FIELD_HELP["shrinkage"])
    p_whiten.add_argument("--out", help="checkpoint path for the whitening factor")

    args = parser.parse_args(argv)

    if args.command == "gen":
        gen_synthetic(args.lam_spec, args.length, args.d, args.seed, out=args.out)
        print(f"wrote {args.out}")
        return 0
    if args.command == "whiten":
        report = run_whiten(args.data, shrinkage=args.shrinkage, out=args.out)
        print(json.dumps(report, indent=2))
        return 0

    runners = {
        "variance-sweep": (VarianceSweepConfig, run_variance_sweep),
        "error-vs-budget": (ErrorBudgetConfig, run_error_vs_budget),
        "timing": (TimingConfig, run_timing_bench),
        "toy-train": (ToyTrainConfig, run_toy_train),
        "stability": (StabilityConfig, run_stability_sweep),
        "grad-check": (GradCheckConfig, run_grad_check),
    }
    cls, runner = runners[args.command]
    cfg = _build_config(args, cls)
    rows = runner(cfg)
    if cfg.out:
        print(f"wrote {cfg.out} ({len(rows)} rows)")
    else:
        print(f"{len(rows)} rows (no --out given)")
    if args.command == "grad-check" and any(row[-1] == "FAIL" for row in rows):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
