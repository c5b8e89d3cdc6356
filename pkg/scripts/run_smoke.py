"""Sanity run: a tiny private GAN for a handful of steps.

Completes in well under a minute and exercises the whole path: data
synthesis (or IDX loading), classifier training, private critic steps,
accounting, evaluation, ledger and checkpoint output.
"""

import argparse
from pathlib import Path

from dplab.config import RunConfig
from dplab.harness import run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data-dir", default="", help="directory with IDX files (optional)")
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = RunConfig(
        data_dir=args.data_dir,
        image_side=8,
        subset=64,
        capacity=2,
        latent_dim=16,
        clip=1.0,
        noise_multiplier=0.8,
        batch_size=8,
        steps=args.steps,
        n_critic=2,
        lr=1e-3,
        seed=args.seed,
        eval_every=max(1, args.steps // 2),
        eval_samples=128,
        eval_splits=2,
        classifier_train=500,
        classifier_val=128,
        classifier_epochs=1,
        out=args.out,
    )
    res = run_experiment(cfg)
    print(f"status: {res.status}")
    print(f"ledger: {res.out_dir / 'ledger.csv'}")
    for row in res.ledger.rows:
        print(
            f"  step {row.step:>4}  eps {row.epsilon:8.4f}  "
            f"IS {row.is_mean:.3f} +- {row.is_std:.3f}"
        )


if __name__ == "__main__":
    main()
