"""Run the two-group statistical parity experiment and print its report."""

import argparse
from pathlib import Path

from rateopt import harness

HERE = Path(__file__).resolve().parent


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=HERE / "parity.cfg", type=Path)
    parser.add_argument("--out", default=None, type=Path)
    parser.add_argument("--jobs", default=1, type=int)
    args = parser.parse_args()
    config = harness.load_config(args.config)
    report = harness.run_experiment(config, jobs=args.jobs, output_dir=args.out or config.output_dir)
    print(report.tsv(), end="")


if __name__ == "__main__":
    main()
