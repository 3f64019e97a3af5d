#!/usr/bin/env python3
"""Constrained coverage study.

Runs sketched SQP on the equality-constrained quadratic test problem at
one or more derivative-noise levels and reports interval coverage for the
average of the off-constraint coordinates.
"""

import argparse
import dataclasses
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from snewt.config import parse_config
from snewt.experiment import (run_experiment, write_aggregate_csv,
                              write_summary_csv)

HERE = os.path.dirname(os.path.abspath(__file__))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--config", default=os.path.join(HERE, "configs", "constrained.ini"))
    parser.add_argument(
        "--sigma2", type=float, nargs="*", default=[1e-4, 1e-2],
        help="derivative-noise variances to sweep (default: 1e-4 1e-2)")
    args = parser.parse_args(argv)

    base = parse_config(args.config)
    code = 0
    for sigma2 in args.sigma2:
        cfg = dataclasses.replace(
            base, problem=dataclasses.replace(base.problem, sigma2=sigma2))
        tag = f"sigma2_{sigma2:g}".replace("-", "m").replace(".", "p")
        out = dataclasses.replace(
            cfg.output,
            aggregate=f"{tag}_{os.path.basename(cfg.output.aggregate)}",
            summary=f"{tag}_{os.path.basename(cfg.output.summary)}")
        cfg = dataclasses.replace(cfg, output=out)

        t0 = time.perf_counter()
        result = run_experiment(cfg)
        elapsed = time.perf_counter() - t0
        write_aggregate_csv(result, cfg.output.aggregate)
        write_summary_csv(result, cfg.output.summary)
        cov = result.final.get("cov_wsc")
        cov_text = "n/a" if cov is None else f"{cov:.4f}"
        print(f"sigma2 = {sigma2:g}: coverage = {cov_text} "
              f"({result.n_diverged} of {result.n_reps} diverged, "
              f"{elapsed:.1f} s) -> {cfg.output.summary}")
        if result.diverged_majority:
            code = 1
    return code


if __name__ == "__main__":
    sys.exit(main())
