"""WGAN-GP models and the two training steps, one private, one not.

The critic is the only network that ever sees real examples, and its step
is the only one that spends privacy budget: per-example loss gradients are
clipped, noise-summed, and averaged before the optimizer sees them. The
generator step consumes latent draws and the critic only; by construction
it receives no dataset handle, so it cannot touch private data and is
never charged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nets, tensor as T
from .accountant import Accountant
from .dp_optim import (
    AdamState,
    NoisyGrad,
    PrivacyParams,
    adam_step,
    adam_update,
    clip_per_example,
    noisy_mean,
)
from .nets import (
    Conv2d,
    ConvT2d,
    Dense,
    Flatten,
    GradRecord,
    LeakyRelu,
    Network,
    ParamSet,
    ReshapeTo,
    Scope,
    Tanh,
    lift_params,
)

SUPPORTED_SIDES = (8, 16, 28)


@dataclass
class GanModel:
    """Generator/critic pair plus the architecture hyperparameters."""

    generator: Network
    critic: Network
    gen_params: ParamSet
    critic_params: ParamSet
    capacity: int
    latent_dim: int
    image_side: int

    def arch(self) -> dict:
        return {
            "capacity": self.capacity,
            "latent_dim": self.latent_dim,
            "image_side": self.image_side,
            "gen_batchnorm": any(
                type(l).__name__ == "BatchNorm" for l in self.generator.layers
            ),
        }


@dataclass(frozen=True)
class GpConfig:
    """Training-loop hyperparameters for the WGAN-GP objective."""

    lambda_gp: float = 10.0
    n_critic: int = 5
    lr: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.5
    adam_eps: float = 1e-8
    generator_ascent: bool = True  # see generator_step

    def __post_init__(self):
        if self.lambda_gp < 0.0:
            raise ValueError(f"lambda_gp must be >= 0, got {self.lambda_gp}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class LatentSampler:
    """Reproducible stream of standard-normal latent batches."""

    def __init__(self, seed: int, latent_dim: int):
        self.latent_dim = latent_dim
        self._rng = np.random.Generator(np.random.Philox(key=seed))

    def sample(self, n: int) -> np.ndarray:
        return self._rng.standard_normal((n, self.latent_dim))


def _spatial_chain(side: int) -> list[int]:
    # stride-2 conv with kernel 5, pad 2 maps s -> ceil(s/2)
    sides = [side]
    for _ in range(3):
        sides.append((sides[-1] + 2 * 2 - 5) // 2 + 1)
    return sides


def build_models(
    capacity: int,
    latent_dim: int,
    image_side: int,
    seed: int,
    gen_batchnorm: bool = False,
) -> GanModel:
    """Critic: 3 strided convs (filters c, 2c, 4c) + dense scalar head.

    Generator mirrors it: dense from the latent to the critic's last
    spatial shape, then 3 transposed convs back up, tanh output. Supported
    sides are 8, 16, and 28 (28 walks 28 -> 14 -> 7 -> 4 and back).
    """
    if image_side not in SUPPORTED_SIDES:
        raise ValueError(
            f"image side {image_side} unsupported; supported sides: {SUPPORTED_SIDES}"
        )
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    if latent_dim < 1:
        raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
    c = capacity
    s0, s1, s2, s3 = _spatial_chain(image_side)
    critic = Network(
        "critic",
        [
            Conv2d("c1", 1, c, side=s0),
            LeakyRelu("a1", 0.2),
            Conv2d("c2", c, 2 * c, side=s1),
            LeakyRelu("a2", 0.2),
            Conv2d("c3", 2 * c, 4 * c, side=s2),
            LeakyRelu("a3", 0.2),
            Flatten("flat"),
            Dense("head", 4 * c * s3 * s3, 1),
        ],
        input_shape=(1, s0, s0),
    )
    gen_layers: list = [
        Dense("fc", latent_dim, 4 * c * s3 * s3),
        LeakyRelu("ga0", 0.2),
        ReshapeTo("rs", (4 * c, s3, s3)),
        ConvT2d("t1", 4 * c, 2 * c, side=s3, out_side=s2),
    ]
    if gen_batchnorm:
        gen_layers.append(nets.BatchNorm("bn1", 2 * c))
    gen_layers += [
        LeakyRelu("ga1", 0.2),
        ConvT2d("t2", 2 * c, c, side=s2, out_side=s1),
    ]
    if gen_batchnorm:
        gen_layers.append(nets.BatchNorm("bn2", c))
    gen_layers += [
        LeakyRelu("ga2", 0.2),
        ConvT2d("t3", c, 1, side=s1, out_side=s0),
        Tanh("out"),
    ]
    generator = Network("generator", gen_layers, input_shape=(latent_dim,))
    rng = np.random.Generator(np.random.Philox(key=seed))
    gen_params = generator.init_params(rng)
    critic_params = critic.init_params(rng)
    return GanModel(
        generator=generator,
        critic=critic,
        gen_params=gen_params,
        critic_params=critic_params,
        capacity=capacity,
        latent_dim=latent_dim,
        image_side=image_side,
    )


def generate(model: GanModel, z: np.ndarray) -> np.ndarray:
    """Images for a latent batch, values in (-1, 1)."""
    return nets.forward(model.generator, model.gen_params, z)


def critic_scores(model: GanModel, images: np.ndarray) -> np.ndarray:
    return nets.forward(model.critic, model.critic_params, images).reshape(-1)


# ---------------------------------------------------------------------------
# per-example critic loss


def _critic_out_scalar(critic: Network, params_t: dict, x: T.Tensor) -> T.Tensor:
    out = critic.apply(params_t, x)  # (1, 1)
    return T.sum_all(out)


def critic_loss_per_example(
    model: GanModel,
    x_i: np.ndarray,
    z_i: np.ndarray,
    rho_i: float,
    lambda_gp: float,
    params_t: dict | None = None,
    fake_i: np.ndarray | None = None,
) -> T.Tensor:
    """Differentiable loss of one example:

        D(G(z_i)) - D(x_i) + lambda * (||grad_x D at y||_2 - 1)^2,
        y = rho_i * x_i + (1 - rho_i) * G(z_i).

    ``params_t`` are lifted critic parameters (created if omitted); the
    generator is applied at fixed parameters. ``fake_i`` short-circuits the
    generator when the caller already synthesized the fake example.
    """
    if not (0.0 <= rho_i <= 1.0):
        raise ValueError(f"rho must lie in [0, 1], got {rho_i}")
    if params_t is None:
        params_t = lift_params(model.critic_params)
    if fake_i is None:
        fake_i = generate(model, z_i.reshape(1, -1))
    x1 = x_i.reshape((1,) + model.critic.input_shape)
    f1 = fake_i.reshape((1,) + model.critic.input_shape)
    d_fake = _critic_out_scalar(model.critic, params_t, T.Tensor(f1))
    d_real = _critic_out_scalar(model.critic, params_t, T.Tensor(x1))
    mix = rho_i * x1 + (1.0 - rho_i) * f1
    y = T.Tensor(mix, requires_grad=True)
    norms = nets.grad_norm_wrt_input(model.critic, params_t, y)
    penalty = T.mul_const(T.square(T.add_const(T.sum_all(norms), -1.0)), lambda_gp)
    return T.add(T.sub(d_fake, d_real), penalty)


def critic_per_example_grads(
    model: GanModel,
    real: np.ndarray,
    z: np.ndarray,
    rho: np.ndarray,
    lambda_gp: float,
) -> tuple[np.ndarray, GradRecord]:
    """Per-example critic-loss values and parameter gradients.

    Row i is computed on a graph containing example i alone, so clipping
    row i bounds exactly that example's influence.
    """
    b = real.shape[0]
    if z.shape[0] != b or rho.shape != (b,):
        raise ValueError(
            f"batch mismatch: real {real.shape}, z {z.shape}, rho {rho.shape}"
        )
    fakes = generate(model, z)
    names = model.critic_params.names()
    rows: dict[str, list[np.ndarray]] = {n: [] for n in names}
    losses = np.zeros(b)
    for i in range(b):
        params_t = lift_params(model.critic_params)
        loss = critic_loss_per_example(
            model,
            real[i],
            z[i],
            float(rho[i]),
            lambda_gp,
            params_t=params_t,
            fake_i=fakes[i],
        )
        losses[i] = float(loss.value)
        gs = T.grad(loss, [params_t[n] for n in names])
        for n, g in zip(names, gs):
            rows[n].append(g.value)
    record = GradRecord(
        grads={n: np.stack(rows[n]) for n in names},
        scope=Scope.PER_EXAMPLE,
        batch_size=b,
    )
    return losses, record


# ---------------------------------------------------------------------------
# training steps


def dp_critic_step(
    model: GanModel,
    real_batch: np.ndarray,
    sampler: LatentSampler,
    privacy: PrivacyParams,
    gp: GpConfig,
    state: AdamState,
    accountant: Accountant,
    noise_rng: np.random.Generator,
) -> tuple[AdamState, NoisyGrad, float]:
    """One private critic update; charges the accountant exactly once.

    Returns the new optimizer state, the noisy gradient (for audit), and
    the mean per-example loss. The model's critic parameters are replaced
    in place on the model object.
    """
    steps_before = accountant.steps
    b = real_batch.shape[0]
    if b == 0:
        # a Poisson draw may select nobody; the mechanism still runs: the
        # empty sum plus noise is released and the step is charged
        losses = np.zeros(0)
        record = GradRecord(
            grads={
                n: np.zeros((0,) + v.shape) for n, v in model.critic_params.items()
            },
            scope=Scope.PER_EXAMPLE,
            batch_size=0,
        )
    else:
        z = sampler.sample(b)
        rho = noise_rng.uniform(size=b)
        losses, record = critic_per_example_grads(model, real_batch, z, rho, gp.lambda_gp)
    clipped, _ = clip_per_example(record, privacy.clip)
    noisy = noisy_mean(clipped, privacy, noise_rng)
    new_params, new_state = adam_step(model.critic_params, state, noisy, gp.lr)
    model.critic_params = new_params
    accountant.charge(1)
    assert accountant.steps == steps_before + 1, "critic step must charge exactly once"
    mean_loss = float(losses.mean()) if b else 0.0
    return new_state, noisy, mean_loss


def generator_step(
    model: GanModel,
    sampler: LatentSampler,
    gp: GpConfig,
    state: AdamState,
) -> tuple[AdamState, float]:
    """One non-private generator update from latent draws only.

    No clipping, no noise, no accountant charge; the signature carries no
    dataset handle, so this step cannot read private data. With
    ``gp.generator_ascent`` the step ascends mean D(G(z)) (the usual
    adversarial objective); without it, it descends the same quantity
    literally. Returns the new state and mean critic score on the fakes.
    """
    z = sampler.sample(gp.batch_size)
    gen_t = lift_params(model.gen_params)
    critic_t = {n: T.Tensor(v) for n, v in model.critic_params.items()}  # frozen
    imgs = model.generator.apply(gen_t, T.Tensor(z))
    scores = model.critic.apply(critic_t, imgs)
    mean_score = T.mul_const(T.sum_all(scores), 1.0 / gp.batch_size)
    objective = T.neg(mean_score) if gp.generator_ascent else mean_score
    names = model.gen_params.names()
    gs = T.grad(objective, [gen_t[n] for n in names])
    grads = {n: g.value for n, g in zip(names, gs)}
    new_params, new_state = adam_update(model.gen_params, grads, state, gp.lr)
    model.gen_params = new_params
    return new_state, float(mean_score.value)
