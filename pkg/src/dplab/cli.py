"""Command-line entry points: single runs and parameter sweeps.

Exit codes: 0 on success, 2 for configuration errors, 3 for runs that
started and then failed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ConfigError, RunConfig, load_config, override
from .harness import RunFailure, run_experiment, sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data-dir", dest="data_dir", help="directory with IDX files")
    p.add_argument("--image-side", dest="image_side", type=int, help="8, 16, or 28")
    p.add_argument("--subset", type=int, help="training subset size (0 = all)")
    p.add_argument("--capacity", type=int, help="first critic conv filter count")
    p.add_argument("--clip", type=float, help="per-example gradient L2 bound C")
    p.add_argument(
        "--noise-multiplier", dest="noise_multiplier", type=float, help="noise multiplier sigma"
    )
    p.add_argument("--batch-size", dest="batch_size", type=int, help="nominal batch size")
    p.add_argument("--steps", type=int, help="total critic steps (each one is charged)")
    p.add_argument("--n-critic", dest="n_critic", type=int, help="critic steps per generator step")
    p.add_argument("--lambda-gp", dest="lambda_gp", type=float, help="gradient penalty weight")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--delta", type=float, help="target delta")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--eval-every", dest="eval_every", type=int, help="evaluation cadence in steps")
    p.add_argument(
        "--eval-samples", dest="eval_samples", type=int, help="generated samples per evaluation"
    )
    p.add_argument("--out", help="output directory")


_OVERRIDE_KEYS = [
    "data_dir",
    "image_side",
    "subset",
    "capacity",
    "clip",
    "noise_multiplier",
    "batch_size",
    "steps",
    "n_critic",
    "lambda_gp",
    "lr",
    "delta",
    "seed",
    "eval_every",
    "eval_samples",
    "out",
]


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    cfg = override(cfg, **{k: getattr(args, k) for k in _OVERRIDE_KEYS})
    return cfg.validate()


def _parse_float_list(raw: str) -> list[float]:
    try:
        return [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as e:
        raise ConfigError(f"bad numeric list: {raw!r}") from e


def _parse_int_list(raw: str) -> list[int]:
    try:
        return [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as e:
        raise ConfigError(f"bad integer list: {raw!r}") from e


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dplab",
        description="Differentially private WGAN-GP training with RDP accounting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one configuration")
    _add_common_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="run a parameter sweep and merge ledgers")
    _add_common_flags(sweep_p)
    sweep_p.add_argument(
        "--sweep-noise", dest="sweep_noise", help="comma-separated noise multipliers"
    )
    sweep_p.add_argument("--sweep-clip", dest="sweep_clip", help="comma-separated clip bounds")
    sweep_p.add_argument(
        "--sweep-capacity", dest="sweep_capacity", help="comma-separated capacities"
    )
    sweep_p.add_argument(
        "--no-baseline",
        dest="baseline",
        action="store_false",
        help="skip the automatic non-private baseline run",
    )

    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
        if args.command == "run":
            result = run_experiment(cfg)
            print(f"run complete: ledger {result.out_dir / 'ledger.csv'}")
            print(
                f"final epsilon {result.final_epsilon:.6g} (delta {cfg.delta:g}), "
                f"final inception score {result.final_is:.4f}"
            )
            return EXIT_OK
        configs = [cfg]
        if args.sweep_noise:
            configs = [
                replace(c, noise_multiplier=s)
                for c in configs
                for s in _parse_float_list(args.sweep_noise)
            ]
        if args.sweep_clip:
            configs = [
                replace(c, clip=cl) for c in configs for cl in _parse_float_list(args.sweep_clip)
            ]
        if args.sweep_capacity:
            configs = [
                replace(c, capacity=cap)
                for c in configs
                for cap in _parse_int_list(args.sweep_capacity)
            ]
        result = sweep(configs, out_dir=cfg.out, baseline=args.baseline)
        print(f"sweep complete: combined ledger {result.combined_csv}")
        for name, why in result.failures.items():
            print(f"  failed: {name}: {why}", file=sys.stderr)
        return EXIT_RUN if result.failures and not result.results else EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
