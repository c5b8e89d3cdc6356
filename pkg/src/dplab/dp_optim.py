"""Per-example clipping, calibrated Gaussian noise, and parameter updates.

The privacy-critical path is: clip each example's gradient to L2 norm at
most C, sum, add N(0, (C*sigma)^2) per coordinate, divide by the nominal
batch size. Everything downstream (plain SGD or Adam) only ever sees the
noisy mean, so post-processing keeps the guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nets import GradRecord, ParamSet, Scope, ScopeError

# norms within this relative tolerance of C count as already clipped, so
# clipping is idempotent bitwise
_CLIP_RTOL = 1e-12
# guard band for the precondition check on already-clipped norms
_NORM_ATOL = 1e-9


@dataclass(frozen=True)
class PrivacyParams:
    """Clip bound, noise multiplier, sampling geometry, and target delta."""

    clip: float
    noise_multiplier: float
    batch_size: int
    dataset_size: int
    delta: float = 1e-5

    def __post_init__(self):
        if not (self.clip > 0.0):
            raise ValueError(f"clip must be positive, got {self.clip}")
        if self.noise_multiplier < 0.0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if math.isinf(self.clip) and self.noise_multiplier > 0.0:
            raise ValueError("infinite clip is only allowed with noise_multiplier 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dataset_size < self.batch_size:
            raise ValueError(
                f"dataset_size {self.dataset_size} smaller than batch_size {self.batch_size}"
            )
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def sampling_rate(self) -> float:
        return self.batch_size / self.dataset_size

    @property
    def mean_sensitivity(self) -> float:
        """L2 sensitivity of the clipped-gradient mean under add/remove."""
        return self.clip / self.batch_size


@dataclass(frozen=True)
class NoiseRecord:
    """What noise was added: seed (if one was given), std, draw count."""

    seed: int | None
    noise_std: float  # per-coordinate std after the 1/|B| divide
    n_draws: int

    @property
    def noise_variance(self) -> float:
        return self.noise_std**2


@dataclass
class NoisyGrad:
    """Noisy mean gradient (batch-mean scope) plus its noise record."""

    record: GradRecord
    noise: NoiseRecord
    clip: float
    noise_multiplier: float
    clipped_fraction: float

    def __post_init__(self):
        if self.record.scope is not Scope.BATCH_MEAN:
            raise ScopeError("NoisyGrad must wrap a BATCH_MEAN record")

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return self.record.grads

    @property
    def batch_size(self) -> int:
        return self.record.batch_size

    def flat(self) -> np.ndarray:
        return self.record.flat()


def clip_per_example(record: GradRecord, clip: float) -> tuple[GradRecord, np.ndarray]:
    """Scale each example's gradient to L2 norm at most ``clip``.

    Returns the clipped record and the pre-clip norms. Examples already at
    or below the bound pass through bitwise unchanged; applying the
    operation twice equals applying it once. The norm is over the full
    flattened parameter vector of one example, a single global bound, not
    per-parameter-group.
    """
    if record.scope is not Scope.PER_EXAMPLE:
        raise ScopeError("clip_per_example needs PER_EXAMPLE gradients")
    if not (clip > 0.0):
        raise ValueError(f"clip must be positive, got {clip}")
    norms = record.per_example_norms()
    if math.isinf(clip):
        return record, norms
    scale = np.ones_like(norms)
    over = norms > clip * (1.0 + _CLIP_RTOL)
    scale[over] = clip / norms[over]
    out: dict[str, np.ndarray] = {}
    for name, g in record.grads.items():
        s = scale.reshape((record.batch_size,) + (1,) * (g.ndim - 1))
        out[name] = np.where(s < 1.0, g * s, g)
    clipped = GradRecord(grads=out, scope=Scope.PER_EXAMPLE, batch_size=record.batch_size)
    return clipped, norms


def noisy_mean(
    record: GradRecord,
    params: PrivacyParams,
    rng: np.random.Generator | int,
) -> NoisyGrad:
    """Sum clipped per-example gradients, add Gaussian noise, average.

    The noise is N(0, (clip * noise_multiplier)^2) per coordinate, added
    once to the sum (never per example, and with no extra scale factor)
    before dividing by the nominal batch size from ``params``, which under
    Poisson sampling may differ from the realized count. Standard normals
    are always drawn, one per coordinate, then scaled, so paired runs with
    equal seeds and different (clip, sigma) see proportional noise.

    ``rng`` is either a numpy Generator or an integer seed; a seed builds a
    counter-based Philox generator and is kept in the noise record.
    """
    if record.scope is not Scope.PER_EXAMPLE:
        raise ScopeError("noisy_mean needs PER_EXAMPLE gradients")
    norms = record.per_example_norms()
    if not math.isinf(params.clip) and np.any(norms > params.clip + _NORM_ATOL):
        raise ValueError(
            f"noisy_mean: per-example norm {norms.max():.6g} exceeds clip {params.clip}; "
            "clip_per_example must run first"
        )
    seed: int | None = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.Generator(np.random.Philox(key=seed))
    b = params.batch_size
    scale = params.clip * params.noise_multiplier
    if math.isinf(params.clip):
        scale = 0.0  # only reachable with noise_multiplier 0
    out: dict[str, np.ndarray] = {}
    n_draws = 0
    for name, g in record.grads.items():
        summed = g.sum(axis=0)
        xi = rng.standard_normal(summed.shape)
        n_draws += xi.size
        out[name] = (summed + xi * scale) / b
    clipped_fraction = 0.0
    if norms.size and not math.isinf(params.clip):
        clipped_fraction = float(np.mean(norms >= params.clip * (1.0 - 1e-9)))
    mean_record = GradRecord(grads=out, scope=Scope.BATCH_MEAN, batch_size=b)
    return NoisyGrad(
        record=mean_record,
        noise=NoiseRecord(seed=seed, noise_std=scale / b, n_draws=n_draws),
        clip=params.clip,
        noise_multiplier=params.noise_multiplier,
        clipped_fraction=clipped_fraction,
    )


def sgd_step(params: ParamSet, grad: NoisyGrad, lr: float) -> ParamSet:
    """theta <- theta - lr * g, preserving names and shapes."""
    return descent_step(params, grad.grads, lr)


def descent_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
    """Plain gradient descent on already-averaged gradients."""
    _check_names(params, grads)
    out = ParamSet()
    for name, v in params.items():
        out.add(name, v - lr * grads[name])
    return out


@dataclass
class AdamState:
    """Moment accumulators, step counter, and the update hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True


def init_adam(
    params: ParamSet,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    bias_correction: bool = True,
) -> AdamState:
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
    if eps < 0.0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    return AdamState(
        m={n: np.zeros_like(p) for n, p in params.items()},
        v={n: np.zeros_like(p) for n, p in params.items()},
        t=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        bias_correction=bias_correction,
    )


def adam_update(
    params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[ParamSet, AdamState]:
    """One Adam update on averaged gradients; returns new params and state.

    Coordinates whose second-moment estimate is exactly zero (no gradient
    signal ever) take a zero step, the 0/0 limit of the update as both
    moments vanish together; this also makes eps=0 well defined.
    """
    _check_names(params, grads)
    t = state.t + 1
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    out = ParamSet()
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        if np.any(v < 0.0):
            raise AssertionError("second moment went negative")
        new_m[name] = m
        new_v[name] = v
        if state.bias_correction:
            mhat = m / (1.0 - state.beta1**t)
            vhat = v / (1.0 - state.beta2**t)
        else:
            mhat, vhat = m, v
        denom = np.sqrt(vhat) + state.eps
        safe = np.where(denom == 0.0, 1.0, denom)
        step = np.where(denom == 0.0, 0.0, mhat / safe)
        out.add(name, p - lr * step)
    return out, AdamState(
        m=new_m,
        v=new_v,
        t=t,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        bias_correction=state.bias_correction,
    )


def adam_step(
    params: ParamSet, state: AdamState, grad: NoisyGrad, lr: float
) -> tuple[ParamSet, AdamState]:
    """Adam on a noisy mean gradient (the private optimizer path)."""
    return adam_update(params, grad.grads, state, lr)


def _check_names(params: ParamSet, grads: dict[str, np.ndarray]) -> None:
    pnames = set(params.names())
    gnames = set(grads)
    if pnames != gnames:
        missing = pnames - gnames
        extra = gnames - pnames
        raise ValueError(f"gradient/parameter name mismatch: missing {missing}, extra {extra}")
