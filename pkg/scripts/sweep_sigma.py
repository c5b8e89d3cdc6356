"""Noise-multiplier sweep: how sigma trades privacy against sample quality.

Runs the same desk-scale configuration at several noise multipliers plus a
non-private baseline, then plots inception score against the epsilon spent
at each evaluation point.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from dplab.harness import sweep
from sweep_common import add_run_args, base_config, plot_is_vs_eps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    add_run_args(ap)
    ap.add_argument("--sigmas", default="0.6,0.8,1.0,2.0", help="comma-separated noise multipliers")
    ap.add_argument("--out", default="runs/sweep_sigma")
    args = ap.parse_args()

    base = base_config(args, out=args.out)
    configs = [
        replace(base, noise_multiplier=float(s)) for s in args.sigmas.split(",") if s.strip()
    ]
    result = sweep(configs, out_dir=args.out, baseline=not args.no_baseline)
    print(f"combined ledger: {result.combined_csv}")
    for name, why in result.failures.items():
        print(f"  failed: {name}: {why}")
    plot_is_vs_eps(result.combined_csv, "noise_multiplier", Path(args.out) / "sigma_sweep.png")


if __name__ == "__main__":
    main()
