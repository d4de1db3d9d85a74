"""Command line entry point: ``rateopt run|shrink|eval|oscillation``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
Set ``RATEOPT_LOG`` to ``error``, ``info`` or ``debug`` for log output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from . import game, lp
from . import harness as H
from . import optimizers as O
from . import rates
from . import solutions as S

log = logging.getLogger("rateopt")

CONFIG_ERRORS = (O.ConfigError, D.DataError, FileNotFoundError, lp.InfeasibleError, ValueError, KeyError)
NUMERICAL_ERRORS = (O.NumericalError, game.StationaryDistributionError, FloatingPointError,
                    lp.UnboundedError, RuntimeError)


def _setup_logging():
    level = os.environ.get("RATEOPT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise O.ConfigError(f"RATEOPT_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def cmd_run(args):
    config = H.load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    report = H.run_experiment(config, jobs=args.jobs, output_dir=args.out)
    sys.stdout.write(report.tsv())


def cmd_shrink(args):
    trace = O.IterateTrace.load(args.trace)
    eps = args.epsilon if args.epsilon == "auto" else float(args.epsilon)
    clf = S.shrink(trace, eps)
    out = Path(args.out) if args.out else Path(args.trace) / "m_stochastic.json"
    clf.save(out)
    sys.stdout.write(f"epsilon\t{clf.info['epsilon']:.6g}\n")
    sys.stdout.write("iterate\tweight\n")
    for t, w in zip(clf.iterations, clf.weights):
        sys.stdout.write(f"{t + 1}\t{w:.6f}\n")


def _load_eval_data(path, goals_raw, feature_dim):
    """Data for ``eval``: the goals file's CSV schema if it has one, else the canonical layout."""
    if goals_raw.get("dataset.source") == "csv" and "dataset.label" in goals_raw:
        schema = H.config_from_raw(goals_raw).dataset.schema
        return D.load_csv(path, schema)
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    return D.load_csv(path, D.canonical_schema(feature_dim, baseline=D.CANONICAL_BASELINE in header))


def cmd_eval(args):
    clf = S.StochasticClassifier.load(args.classifier)
    if clf.spec is None:
        raise O.ConfigError("classifier file has no model spec")
    goals_path = Path(args.goals)
    if not goals_path.is_file():
        raise FileNotFoundError(f"no such goals file: {goals_path}")
    raw = H.parse_config_text(goals_path.read_text())
    goals = H.goals_from_raw(raw)
    dataset = _load_eval_data(args.data, raw, clf.spec.input_dim)
    constraints = rates.build_goals(goals, dataset)
    report = S.evaluate(clf, dataset, constraints)
    sys.stdout.write(json.dumps(report, indent=1, sort_keys=True) + "\n")


def cmd_oscillation(args):
    trace = O.IterateTrace.load(args.trace)
    H.export_oscillation(trace, args.out)
    sys.stdout.write(f"wrote {len(trace)} rows to {args.out}\n")


def build_parser():
    parser = argparse.ArgumentParser(prog="rateopt", description="Train and evaluate rate-constrained classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config and print the report")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("shrink", help="shrink a saved trace to at most m+1 iterates")
    p.add_argument("--trace", required=True)
    p.add_argument("--epsilon", default="auto")
    p.add_argument("--out")
    p.set_defaults(func=cmd_shrink)

    p = sub.add_parser("eval", help="evaluate a saved classifier on a CSV against goals")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--goals", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oscillation", help="export per-iterate error and violation as TSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oscillation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if getattr(args, "jobs", 1) < 1:
            raise O.ConfigError("--jobs must be at least 1")
        args.func(args)
    except NUMERICAL_ERRORS as exc:
        log.error("numerical failure: %s", exc)
        print(f"rateopt: numerical failure: {exc}", file=sys.stderr)
        return 2
    except CONFIG_ERRORS as exc:
        print(f"rateopt: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
