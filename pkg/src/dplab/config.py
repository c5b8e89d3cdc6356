"""Run configuration: a flat key=value schema with typed parsing.

Config files hold one ``key = value`` pair per line (# comments allowed);
CLI flags override file values. The schema is the RunConfig dataclass;
unknown keys and untypeable values are hard errors, never warnings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration key, value, or combination."""


@dataclass(frozen=True)
class RunConfig:
    # data
    data_dir: str = ""
    image_side: int = 28
    subset: int = 0  # 0 = use everything available
    # model
    capacity: int = 32
    latent_dim: int = 128
    gen_batchnorm: bool = False
    # privacy
    clip: float = 1.0
    noise_multiplier: float = 0.8
    delta: float = 1e-5
    # training
    batch_size: int = 32
    steps: int = 2000  # total critic steps; the accountant charges each one
    n_critic: int = 5
    lambda_gp: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.5
    adam_eps: float = 1e-8
    sampling: str = "poisson"  # poisson | fixed; fixed mismatches the accountant's q
    generator_objective: str = "ascend"  # ascend | descend mean critic score on fakes
    seed: int = 0
    # evaluation
    eval_every: int = 500
    eval_samples: int = 2048
    eval_splits: int = 10
    classifier_path: str = ""  # load this checkpoint instead of training one
    classifier_train: int = 8000
    classifier_val: int = 2000
    classifier_epochs: int = 4
    # output
    out: str = "runs/run"
    timing: str = "wall"  # wall | none (none writes 0.0, for byte-identical ledgers)

    def validate(self) -> "RunConfig":
        if self.image_side not in (8, 16, 28):
            raise ConfigError(f"image_side must be one of 8, 16, 28, got {self.image_side}")
        if self.capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {self.capacity}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not (self.clip > 0.0):
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if math.isinf(self.clip) and self.noise_multiplier > 0.0:
            raise ConfigError("clip=inf requires noise_multiplier=0")
        if self.noise_multiplier < 0.0:
            raise ConfigError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.n_critic < 1:
            raise ConfigError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.lambda_gp < 0.0:
            raise ConfigError(f"lambda_gp must be >= 0, got {self.lambda_gp}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.sampling not in ("poisson", "fixed"):
            raise ConfigError(f"sampling must be poisson or fixed, got {self.sampling!r}")
        if self.generator_objective not in ("ascend", "descend"):
            raise ConfigError(
                f"generator_objective must be ascend or descend, got {self.generator_objective!r}"
            )
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eval_samples < self.eval_splits * 10:
            raise ConfigError(
                f"eval_samples must cover splits*classes = {self.eval_splits * 10}, "
                f"got {self.eval_samples}"
            )
        if self.timing not in ("wall", "none"):
            raise ConfigError(f"timing must be wall or none, got {self.timing!r}")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES.get(key)
    if ftype is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {ftype})") from e


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        updates[key] = _parse_value(key, raw)
    return replace(cfg, **updates)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), base)


def override(cfg: RunConfig, **kwargs) -> RunConfig:
    """Apply non-None keyword overrides (CLI flags) with type checking."""
    updates = {}
    for key, value in kwargs.items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = value
    return replace(cfg, **updates)


def config_as_text(cfg: RunConfig) -> str:
    """Serialize back to the flat schema (diffable, reloadable)."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, float):
            lines.append(f"{f.name} = {v:.17g}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
