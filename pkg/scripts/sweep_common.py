"""Shared pieces for the sweep scripts: base config and the IS-vs-eps plot."""

import argparse
import csv
import math
from pathlib import Path

from dplab.config import RunConfig


def add_run_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--data-dir", default="", help="directory with IDX files (optional)")
    ap.add_argument("--image-side", type=int, default=8)
    ap.add_argument("--subset", type=int, default=4000)
    ap.add_argument("--capacity", type=int, default=8)
    ap.add_argument("--clip", type=float, default=1.0)
    ap.add_argument("--noise-multiplier", type=float, default=0.8)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=500)
    ap.add_argument("--no-baseline", action="store_true")


def base_config(args: argparse.Namespace, out: str) -> RunConfig:
    return RunConfig(
        data_dir=args.data_dir,
        image_side=args.image_side,
        subset=args.subset,
        capacity=args.capacity,
        clip=args.clip,
        noise_multiplier=args.noise_multiplier,
        batch_size=args.batch_size,
        steps=args.steps,
        n_critic=5,
        lr=args.lr,
        beta1=0.9,
        beta2=0.5,
        seed=args.seed,
        eval_every=args.eval_every,
        out=out,
    )


def plot_is_vs_eps(sweep_csv: Path, key: str, out_png: Path) -> None:
    """One curve per swept value: inception score against spent epsilon.

    Non-private rows (epsilon = inf) become a dashed horizontal reference
    at their final score. Skips quietly when matplotlib is missing.
    """
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping the plot")
        return

    groups: dict[str, list[tuple[float, float]]] = {}
    baseline = None
    with open(sweep_csv) as f:
        for row in csv.DictReader(f):
            eps = float(row["epsilon"])
            score = float(row["is_mean"])
            if math.isinf(eps):
                baseline = score  # last row wins: the final non-private score
                continue
            groups.setdefault(row[key], []).append((eps, score))

    fig, ax = plt.subplots(figsize=(6, 4))
    for value, pts in sorted(groups.items(), key=lambda kv: float(kv[0])):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{key}={float(value):g}")
    if baseline is not None:
        ax.axhline(baseline, linestyle="--", color="gray", label="non-private")
    ax.set_xlabel("epsilon spent (delta fixed)")
    ax.set_ylabel("inception score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    print(f"plot: {out_png}")
