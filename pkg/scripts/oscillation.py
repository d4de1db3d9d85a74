"""Train a one-hidden-layer network on COMPAS-like data under equal opportunity
and write per-iterate exact error and violation as TSV."""

import argparse
from pathlib import Path

from rateopt import data, harness, models, optimizers, rates


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=Path("oscillation.tsv"), type=Path)
    parser.add_argument("--n", default=2000, type=int)
    parser.add_argument("--T", default=1000, type=int)
    parser.add_argument("--hidden", default=8, type=int)
    parser.add_argument("--slack", default=0.05, type=float)
    parser.add_argument("--algorithm", default="stochastic_proxy_lagrangian")
    parser.add_argument("--seed", default=0, type=int)
    args = parser.parse_args()

    ds = data.synth_compas_like(args.n, args.seed)
    spec = models.ModelSpec("mlp1", ds.feature_dim, hidden_units=args.hidden, param_bound=10.0)
    constraints = rates.build_goals([rates.GoalSpec("equal_opportunity", slack=args.slack)], ds)
    problem = optimizers.RateProblem(ds, spec, models.ObjectiveSpec(), constraints)
    cfg = optimizers.OptimizerConfig(args.algorithm, T=args.T, minibatch_size=100, seed=args.seed)
    trace = optimizers.run(problem, cfg)
    print(harness.export_oscillation(trace, args.out))


if __name__ == "__main__":
    main()
