"""Network layers, parameter containers, and gradient entry points.

Layers are declarative dataclasses; a ``Network`` owns an ordered list of
them and knows how to initialize parameters and run a forward pass as a
differentiable graph. Gradients come in two scopes that the privacy code
keeps strictly apart: per-example (one gradient per input row, the only
kind that may be clipped) and batch-mean.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ShapeMismatch(ValueError):
    """Input shape does not match what a layer expects; names the layer."""


class ScopeError(ValueError):
    """A gradient record was used where the other scope is required."""


class Scope(enum.Enum):
    PER_EXAMPLE = "per_example"
    BATCH_MEAN = "batch_mean"


# ---------------------------------------------------------------------------
# parameter container


class ParamSet:
    """Ordered mapping from parameter name to float64 array.

    Order is insertion order and is part of the contract: flattening and
    checkpoint serialization both follow it.
    """

    def __init__(self, items: dict[str, np.ndarray] | None = None):
        self._items: dict[str, np.ndarray] = {}
        if items:
            for k, v in items.items():
                self._items[k] = np.asarray(v, dtype=np.float64)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._items[name] = np.asarray(value, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self._items)

    def leaves(self) -> list[np.ndarray]:
        return list(self._items.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self._items.values())

    def flat(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._items.values()])

    def replace_values(self, flat: np.ndarray) -> "ParamSet":
        """New ParamSet with the same names/shapes, values from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"replace_values: need {self.n_params} values, got {flat.shape}")
        out = ParamSet()
        pos = 0
        for name, v in self._items.items():
            out.add(name, flat[pos : pos + v.size].reshape(v.shape))
            pos += v.size
        return out

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._items.items()})

    def map(self, fn) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._items.items()})


@dataclass
class GradRecord:
    """Gradients for every parameter of a network, tagged with their scope.

    PER_EXAMPLE: each array has a leading batch axis.
    BATCH_MEAN: each array has the parameter's own shape.
    """

    grads: dict[str, np.ndarray]
    scope: Scope
    batch_size: int

    def flat(self) -> np.ndarray:
        if self.scope is Scope.PER_EXAMPLE:
            # explicit widths: reshape(-1) cannot infer them for an empty batch
            return np.concatenate(
                [
                    g.reshape(self.batch_size, int(np.prod(g.shape[1:], dtype=np.int64)))
                    for g in self.grads.values()
                ],
                axis=1,
            )
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def per_example_norms(self) -> np.ndarray:
        if self.scope is not Scope.PER_EXAMPLE:
            raise ScopeError("per_example_norms needs a PER_EXAMPLE record")
        return np.sqrt(np.sum(self.flat() ** 2, axis=1))


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    name: str
    in_dim: int
    out_dim: int

    def param_shapes(self):
        return {f"{self.name}.w": (self.in_dim, self.out_dim), f"{self.name}.b": (self.out_dim,)}

    def init(self, rng: np.random.Generator):
        scale = 1.0 / math.sqrt(self.in_dim)
        return {
            f"{self.name}.w": rng.normal(0.0, scale, (self.in_dim, self.out_dim)),
            f"{self.name}.b": np.zeros(self.out_dim),
        }

    def apply(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"{self.name}: expected (batch, {self.in_dim}), got {x.shape}")
        return T.add_bias(T.matmul(x, params[f"{self.name}.w"]), params[f"{self.name}.b"])


@dataclass(frozen=True)
class Conv2d:
    """Strided convolution, square kernel, symmetric zero padding."""

    name: str
    in_channels: int
    out_channels: int
    side: int
    kernel: int = 5
    stride: int = 2
    pad: int = 2

    @property
    def out_side(self) -> int:
        return (self.side + 2 * self.pad - self.kernel) // self.stride + 1

    def param_shapes(self):
        cols = self.in_channels * self.kernel * self.kernel
        return {
            f"{self.name}.w": (cols, self.out_channels),
            f"{self.name}.b": (self.out_channels,),
        }

    def init(self, rng: np.random.Generator):
        cols = self.in_channels * self.kernel * self.kernel
        scale = 1.0 / math.sqrt(cols)
        return {
            f"{self.name}.w": rng.normal(0.0, scale, (cols, self.out_channels)),
            f"{self.name}.b": np.zeros(self.out_channels),
        }

    def apply(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.side, self.side):
            raise ShapeMismatch(
                f"{self.name}: expected (batch, {self.in_channels}, {self.side}, "
                f"{self.side}), got {x.shape}"
            )
        geom = T.conv_geometry(
            self.in_channels, self.side, self.side, self.kernel, self.stride, self.pad
        )
        cols = T.im2col(x, geom)  # (b, oh*ow, c*k*k)
        out = T.matmul(cols, params[f"{self.name}.w"])  # (b, oh*ow, out_c)
        out = T.add_bias(out, params[f"{self.name}.b"])
        b = x.shape[0]
        out = T.reshape(out, (b, geom.oh, geom.ow, self.out_channels))
        return T.transpose(out, (0, 3, 1, 2))


@dataclass(frozen=True)
class ConvT2d:
    """Transposed convolution: the adjoint scatter of a strided conv.

    ``out_side`` is chosen by the builder; with stride 2 an even target
    needs one row/col of asymmetric output padding, which the scatter
    geometry absorbs.
    """

    name: str
    in_channels: int
    out_channels: int
    side: int
    out_side: int
    kernel: int = 5
    stride: int = 2
    pad: int = 2

    def __post_init__(self):
        # the forward conv mapping out_side -> side must be consistent
        implied = (self.out_side + 2 * self.pad - self.kernel) // self.stride + 1
        if implied != self.side:
            raise ValueError(
                f"{self.name}: out_side {self.out_side} is not reachable from side "
                f"{self.side} with kernel {self.kernel} stride {self.stride}"
            )

    def param_shapes(self):
        cols = self.out_channels * self.kernel * self.kernel
        return {
            f"{self.name}.w": (self.in_channels, cols),
            f"{self.name}.b": (self.out_channels,),
        }

    def init(self, rng: np.random.Generator):
        cols = self.out_channels * self.kernel * self.kernel
        scale = 1.0 / math.sqrt(self.in_channels * self.kernel * self.kernel // (self.stride**2))
        return {
            f"{self.name}.w": rng.normal(0.0, scale, (self.in_channels, cols)),
            f"{self.name}.b": np.zeros(self.out_channels),
        }

    def apply(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.side, self.side):
            raise ShapeMismatch(
                f"{self.name}: expected (batch, {self.in_channels}, {self.side}, "
                f"{self.side}), got {x.shape}"
            )
        geom = T.conv_geometry(
            self.out_channels, self.out_side, self.out_side, self.kernel, self.stride, self.pad
        )
        b = x.shape[0]
        h = T.transpose(x, (0, 2, 3, 1))  # (b, s, s, in_c)
        h = T.reshape(h, (b, self.side * self.side, self.in_channels))
        cols = T.matmul(h, params[f"{self.name}.w"])  # (b, s*s, out_c*k*k)
        out = T.col2im(cols, geom)  # (b, out_c, out_side, out_side)
        return T.add_channel_bias(out, params[f"{self.name}.b"])


@dataclass(frozen=True)
class LeakyRelu:
    name: str
    slope: float = 0.2

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, x: Tensor, params) -> Tensor:
        return T.leaky_relu(x, self.slope)


@dataclass(frozen=True)
class Tanh:
    name: str

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, x: Tensor, params) -> Tensor:
        return T.tanh(x)


@dataclass(frozen=True)
class Sigmoid:
    name: str

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, x: Tensor, params) -> Tensor:
        return T.sigmoid(x)


@dataclass(frozen=True)
class Flatten:
    name: str

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, x: Tensor, params) -> Tensor:
        b = x.shape[0]
        return T.reshape(x, (b, int(np.prod(x.shape[1:]))))


@dataclass(frozen=True)
class ReshapeTo:
    """Reshape (batch, features) to (batch, *target)."""

    name: str
    target: tuple[int, ...]

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def apply(self, x: Tensor, params) -> Tensor:
        if x.ndim != 2 or x.shape[1] != int(np.prod(self.target)):
            raise ShapeMismatch(
                f"{self.name}: expected (batch, {int(np.prod(self.target))}), got {x.shape}"
            )
        return T.reshape(x, (x.shape[0],) + tuple(self.target))


@dataclass(frozen=True)
class BatchNorm:
    """Batch-statistics normalization over all axes but channel (axis 1).

    Training-mode statistics only; gradients treat the per-batch mean and
    variance as functions of the input, first order.
    """

    name: str
    channels: int
    eps: float = 1e-5

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}

    def init(self, rng):
        return {
            f"{self.name}.gamma": np.ones(self.channels),
            f"{self.name}.beta": np.zeros(self.channels),
        }

    def apply(self, x: Tensor, params) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"{self.name}: expected (batch, {self.channels}, h, w), got {x.shape}")
        axes = (0, 2, 3)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = T.mul_const(T.sum_axes(x, axes, keepdims=True), 1.0 / n)
        centered = T.sub(x, T.expand_axes(mean, x.shape, axes))
        var = T.mul_const(T.sum_axes(T.square(centered), axes, keepdims=True), 1.0 / n)
        inv = T.pow_const(T.add_const(var, self.eps), -0.5)
        xhat = T.mul(centered, T.expand_axes(inv, x.shape, axes))
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        g4 = T.reshape(gamma, (1, self.channels, 1, 1))
        b4 = T.reshape(beta, (1, self.channels, 1, 1))
        return T.add(
            T.mul(xhat, T.expand_axes(g4, x.shape, (0, 2, 3))),
            T.expand_axes(b4, x.shape, (0, 2, 3)),
        )


# ---------------------------------------------------------------------------
# network


class Network:
    """Ordered stack of layers with named parameters."""

    def __init__(self, name: str, layers: list, input_shape: tuple[int, ...]):
        self.name = name
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self._shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            for pname, shape in layer.param_shapes().items():
                if pname in self._shapes:
                    raise ValueError(f"duplicate parameter name {pname!r}")
                self._shapes[pname] = tuple(shape)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return dict(self._shapes)

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        ps = ParamSet()
        for layer in self.layers:
            for pname, value in layer.init(rng).items():
                ps.add(pname, value)
        return ps

    def apply(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(
                f"{self.name}: expected input (batch, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )
        h = x
        for layer in self.layers:
            h = layer.apply(h, params)
        return h


def lift_params(params: ParamSet) -> dict[str, Tensor]:
    """Wrap every parameter array as a gradient-tracked graph leaf."""
    return {name: Tensor(v, requires_grad=True) for name, v in params.items()}


def forward(net: Network, params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Plain inference: no graph is kept."""
    out = net.apply({n: Tensor(v) for n, v in params.items()}, Tensor(x))
    return out.value


# ---------------------------------------------------------------------------
# gradient entry points


def batch_mean_grad(
    loss_fn, net: Network, params: ParamSet, batch: np.ndarray
) -> tuple[float, GradRecord]:
    """Gradient of the mean of ``loss_fn`` over the batch.

    ``loss_fn(output)`` maps the network output tensor to a (batch,)-shaped
    per-example loss tensor; this function averages it and differentiates.
    """
    lifted = lift_params(params)
    out = net.apply(lifted, Tensor(batch))
    losses = loss_fn(out)
    if losses.ndim != 1 or losses.shape[0] != batch.shape[0]:
        raise ShapeMismatch(f"loss_fn must return (batch,) losses, got {losses.shape}")
    loss = T.mul_const(T.sum_all(losses), 1.0 / batch.shape[0])
    names = params.names()
    gs = T.grad(loss, [lifted[n] for n in names])
    return float(loss.value), GradRecord(
        grads={n: g.value for n, g in zip(names, gs)},
        scope=Scope.BATCH_MEAN,
        batch_size=batch.shape[0],
    )


def per_example_grads(loss_fn, net: Network, params: ParamSet, batch: np.ndarray) -> GradRecord:
    """One gradient per example: differentiate each singleton batch alone.

    Builds a separate graph per example so no cross-example term can leak
    into any row; row i of every array depends on example i only.
    """
    names = params.names()
    b = batch.shape[0]
    if b == 0:
        raise ValueError("per_example_grads: empty batch")
    rows: dict[str, list[np.ndarray]] = {n: [] for n in names}
    for i in range(b):
        lifted = lift_params(params)
        out = net.apply(lifted, Tensor(batch[i : i + 1]))
        losses = loss_fn(out)
        if losses.size != 1:
            raise ShapeMismatch(f"loss_fn must return one loss per example, got {losses.shape}")
        loss = T.sum_all(losses)
        gs = T.grad(loss, [lifted[n] for n in names])
        for n, g in zip(names, gs):
            rows[n].append(g.value)
    return GradRecord(
        grads={n: np.stack(rows[n]) for n in names},
        scope=Scope.PER_EXAMPLE,
        batch_size=b,
    )


def grad_norm_wrt_input(
    net: Network, params_t: dict[str, Tensor], x: Tensor
) -> Tensor:
    """||d out / d x||_2 per example, as a differentiable (batch,) tensor.

    The network output must be (batch, 1) or (batch,). The inner backward
    pass is built from graph ops, so the returned norms can be
    differentiated once more (with respect to the parameters).
    """
    out = net.apply(params_t, x)
    if out.ndim == 2 and out.shape[1] == 1:
        out = T.reshape(out, (out.shape[0],))
    if out.ndim != 1:
        raise ShapeMismatch(f"grad_norm_wrt_input: output must be per-example scalar, got {out.shape}")
    total = T.sum_all(out)  # d total / d x_i = d out_i / d x_i, rows independent
    (gx,) = T.grad(total, [x])
    b = x.shape[0]
    sq = T.sum_axes(T.square(T.reshape(gx, (b, -1))), (1,))
    return T.sqrt_guard0(sq)


def gradient_penalty(
    net: Network,
    params: ParamSet,
    real: np.ndarray,
    fake: np.ndarray,
    rho: np.ndarray,
    lam: float,
) -> tuple[np.ndarray, GradRecord]:
    """Two-sided per-example penalty lam*(||grad_x out|| - 1)^2 at mixtures.

    ``rho`` holds one mixing coefficient in [0, 1] per example; the
    evaluation point is rho*real + (1-rho)*fake. Returns the per-example
    penalty values and PER_EXAMPLE parameter gradients.
    """
    if real.shape != fake.shape:
        raise ShapeMismatch(f"gradient_penalty: real {real.shape} vs fake {fake.shape}")
    b = real.shape[0]
    if rho.shape != (b,):
        raise ShapeMismatch(f"gradient_penalty: rho must be ({b},), got {rho.shape}")
    names = params.names()
    rows: dict[str, list[np.ndarray]] = {n: [] for n in names}
    vals = np.zeros(b)
    rho_b = rho.reshape((b,) + (1,) * (real.ndim - 1))
    mix = rho_b * real + (1.0 - rho_b) * fake
    for i in range(b):
        lifted = lift_params(params)
        x = Tensor(mix[i : i + 1], requires_grad=True)
        norms = grad_norm_wrt_input(net, lifted, x)
        pen = T.mul_const(T.square(T.add_const(norms, -1.0)), lam)
        loss = T.sum_all(pen)
        vals[i] = float(loss.value)
        gs = T.grad(loss, [lifted[n] for n in names])
        for n, g in zip(names, gs):
            rows[n].append(g.value)
    return vals, GradRecord(
        grads={n: np.stack(rows[n]) for n in names},
        scope=Scope.PER_EXAMPLE,
        batch_size=b,
    )


def l2_norm(arrays: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))
