"""Capacity sweep: critic/generator width against the privacy budget.

Capacity sets the first critic convolution's filter count (doubling per
layer); wider models have more coordinates sharing one clipped-noised
gradient, which changes the useful signal per unit of budget.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from dplab.harness import sweep
from sweep_common import add_run_args, base_config, plot_is_vs_eps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    add_run_args(ap)
    ap.add_argument("--capacities", default="4,8,16", help="comma-separated capacities")
    ap.add_argument("--out", default="runs/sweep_capacity")
    args = ap.parse_args()

    base = base_config(args, out=args.out)
    configs = [
        replace(base, capacity=int(c)) for c in args.capacities.split(",") if c.strip()
    ]
    result = sweep(configs, out_dir=args.out, baseline=not args.no_baseline)
    print(f"combined ledger: {result.combined_csv}")
    for name, why in result.failures.items():
        print(f"  failed: {name}: {why}")
    plot_is_vs_eps(result.combined_csv, "capacity", Path(args.out) / "capacity_sweep.png")


if __name__ == "__main__":
    main()
