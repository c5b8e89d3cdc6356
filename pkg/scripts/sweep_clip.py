"""Clipping-bound sweep: the effect of the per-example L2 bound C.

The noise standard deviation is C*sigma/B, so C shifts the balance between
clipping bias (small C) and noise magnitude (large C) at a fixed budget.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from dplab.harness import sweep
from sweep_common import add_run_args, base_config, plot_is_vs_eps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    add_run_args(ap)
    ap.add_argument("--clips", default="0.3,1.0,3.0", help="comma-separated clip bounds")
    ap.add_argument("--out", default="runs/sweep_clip")
    args = ap.parse_args()

    base = base_config(args, out=args.out)
    configs = [replace(base, clip=float(c)) for c in args.clips.split(",") if c.strip()]
    result = sweep(configs, out_dir=args.out, baseline=not args.no_baseline)
    print(f"combined ledger: {result.combined_csv}")
    for name, why in result.failures.items():
        print(f"  failed: {name}: {why}")
    plot_is_vs_eps(result.combined_csv, "clip", Path(args.out) / "clip_sweep.png")


if __name__ == "__main__":
    main()
