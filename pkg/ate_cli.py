"""
Command line entry point: run scenarios, analyze a trial file, export a simulated trial or print a true effect.
"""

import argparse
from dataclasses import replace
import logging
from pathlib import Path
import sys
from typing import List, Optional

import numpy as np

from adjusters import KINDS, AdjusterSpec
from datagen import ModelSpec, generate, true_ate
from estimators import DEFAULT_LEVEL, EstimationError
import harness
from randomizers import KINDS as RANDOMIZER_KINDS, RandomizerConfig, randomize
import trial_data
from trial_data import ColumnRoles, TrialValidationError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3


def _overrides(pairs: List[str]) -> dict:
    result = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"Expected key=value, got '{pair}'.")
        result[key.strip()] = value.strip()
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ate_cli", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="run the scenarios of a config file")
    simulate.add_argument("--config", required=True, type=Path)
    simulate.add_argument("--out", type=Path, help="write the table here instead of stdout")
    simulate.add_argument("--format", choices=("csv", "markdown"), default="csv")
    simulate.add_argument("--layout", choices=("long", "wide"), default="long")
    simulate.add_argument("--jobs", type=int, default=1, help="parallel replication workers")
    simulate.add_argument("--replications", type=int, help="override the replications of every scenario")

    analyze = commands.add_parser("analyze", help="estimate the effect in a trial file")
    analyze.add_argument("--data", required=True, type=Path)
    analyze.add_argument("--adjuster", choices=KINDS, default="ols")
    analyze.add_argument("--stratum-specific", action="store_true")
    analyze.add_argument("--crossfit", type=int, metavar="M", help="cross-fit with M folds")
    analyze.add_argument("--within-strata", action="store_true", help="draw the cross-fitting folds per stratum")
    analyze.add_argument("--pi", type=float, help="target treated proportion, default observed share")
    analyze.add_argument("--level", type=float, default=DEFAULT_LEVEL)
    analyze.add_argument("--seed", type=int, default=harness.DEFAULT_SEED)
    analyze.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                         help="adjuster hyperparameter override")
    analyze.add_argument("--outcome", default="Y")
    analyze.add_argument("--arm", default="A")
    analyze.add_argument("--stratum", default="B")

    generate_cmd = commands.add_parser("generate", help="draw and randomize one trial of a model and write it as CSV")
    generate_cmd.add_argument("--model", type=int, required=True)
    generate_cmd.add_argument("--n", type=int, default=1000)
    generate_cmd.add_argument("--p", type=int, help="covariates of Models 5 to 8")
    generate_cmd.add_argument("--pi", type=float, default=0.5)
    generate_cmd.add_argument("--randomizer", choices=RANDOMIZER_KINDS, default="stratified_block")
    generate_cmd.add_argument("--seed", type=int, default=harness.DEFAULT_SEED)
    generate_cmd.add_argument("--out", required=True, type=Path)

    truth = commands.add_parser("truth", help="print the true average treatment effect of a model")
    truth.add_argument("--model", type=int, required=True)
    truth.add_argument("--mc", type=int, metavar="N", help="Monte Carlo draws instead of the closed form")
    truth.add_argument("--seed", type=int, default=harness.TRUTH_SEED)
    return parser


def _simulate(args) -> int:
    scenarios = harness.load_config(args.config)
    if args.replications is not None:
        scenarios = [replace(cfg, replications=args.replications) for cfg in scenarios]
    summaries = [harness.run_scenario(cfg, n_jobs=args.jobs) for cfg in scenarios]
    table = harness.emit_table(summaries, fmt=args.format, layout=args.layout)
    if args.out is not None:
        args.out.write_text(table, encoding="utf-8")
        log.info("Wrote %d rows to %s", len(summaries), args.out)
    else:
        sys.stdout.write(table)
    return EXIT_OK


def _analyze(args) -> int:
    spec = AdjusterSpec.from_strings(args.adjuster, args.stratum_specific, _overrides(args.param))
    roles = ColumnRoles(outcome=args.outcome, arm=args.arm, stratum=args.stratum)
    report = harness.analyze(args.data, spec, folds=args.crossfit, pi_target=args.pi, level=args.level,
                             seed=args.seed, roles=roles, within_strata=args.within_strata)
    sys.stdout.write(report.render())
    return EXIT_OK


def _generate(args) -> int:
    rng = np.random.default_rng(args.seed)
    ds = generate(ModelSpec(model_id=args.model, n=args.n, p=args.p), rng, pi_target=args.pi)
    ds = ds.with_assignment(randomize(RandomizerConfig(kind=args.randomizer, pi_target=args.pi), ds.B, rng))
    trial_data.write_csv(ds, args.out)
    log.info("Wrote %d units of model %d to %s", ds.n, args.model, args.out)
    return EXIT_OK


def _truth(args) -> int:
    spec = ModelSpec(model_id=args.model)
    if args.mc is None and spec.base_model == 1:
        result = true_ate(spec)
    else:
        draws = args.mc if args.mc is not None else harness.DEFAULT_TRUTH_DRAWS
        result = true_ate(spec, method="monte_carlo", draws=draws, rng=np.random.default_rng(args.seed))
    sys.stdout.write(f"model {args.model}: tau = {result.tau:.6f} (se {result.se:.6f}, {result.method})\n")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one command and map failures to exit codes: 2 for invalid input, 3 for an aborted estimation.
    """
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    handlers = {"simulate": _simulate, "analyze": _analyze, "generate": _generate, "truth": _truth}
    try:
        return handlers[args.command](args)
    except TrialValidationError as exc:
        for violation in exc.violations:
            sys.stderr.write(f"error: {violation}\n")
        return EXIT_VALIDATION
    except (EstimationError, harness.ReplicationError) as exc:
        sys.stderr.write(f"estimation aborted: {exc}\n")
        return EXIT_ESTIMATION
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION


if __name__ == "__main__":
    logging.basicConfig()
    sys.exit(main())
