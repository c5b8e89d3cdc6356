"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and, when gradients are being traced,
carries edges to its inputs together with vector-Jacobian closures. The
closures are written in terms of the public ops, so a computed gradient is
itself a differentiable graph node. One extra level of differentiation is
all the training code relies on: it is what the critic's gradient-norm
penalty needs.

Everything is float64 and single threaded. Results are deterministic for
identical inputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Vjp = Callable[["Tensor"], "Tensor"]


class Tensor:
    """Dense n-dimensional float64 value, optionally part of a graph."""

    __slots__ = ("value", "requires_grad", "_parents")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, *edges: tuple[Tensor, Vjp]) -> Tensor:
    live = tuple(e for e in edges if e[0].requires_grad)
    return Tensor(value, requires_grad=bool(live), parents=live)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _node(a.value + b.value, (a, lambda g: g), (b, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _node(a.value - b.value, (a, lambda g: g), (b, neg))


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a, neg))


def add_const(a: Tensor, c: float) -> Tensor:
    return _node(a.value + c, (a, lambda g: g))


def add_constarr(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant array (no gradient flows into it)."""
    out = a.value + arr
    if out.shape != a.shape:
        raise ValueError(f"add_constarr: broadcast changed shape {a.shape} -> {out.shape}")
    return _node(out, (a, lambda g: g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _node(
        a.value * b.value,
        (a, lambda g: mul(g, b)),
        (b, lambda g: mul(g, a)),
    )


def mul_const(a: Tensor, c: float) -> Tensor:
    return _node(a.value * c, (a, lambda g: mul_const(g, c)))


def mul_constarr(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array, elementwise; shape must be preserved."""
    out = a.value * arr
    if out.shape != a.shape:
        raise ValueError(f"mul_constarr: broadcast changed shape {a.shape} -> {out.shape}")
    return _node(out, (a, lambda g: mul_constarr(g, arr)))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# matmul, supporting the (batch, rows, k) @ (k, cols) shapes the layers use


def matmul(a: Tensor, b: Tensor) -> Tensor:
    an, bn = a.ndim, b.ndim
    if an not in (2, 3) or bn not in (2, 3):
        raise ValueError(f"matmul: unsupported ranks {an} @ {bn}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if an == 3 and bn == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul: batch dims {a.shape} @ {b.shape}")
    if an == 3 and bn == 2:
        # one flat GEMM instead of a strided batch of small ones
        m, r, k = a.shape
        out = (a.value.reshape(m * r, k) @ b.value).reshape(m, r, b.shape[1])
    else:
        out = a.value @ b.value

    def vjp_a(g: Tensor) -> Tensor:
        gb = matmul(g, transpose(b, (0, 2, 1) if bn == 3 else (1, 0)))
        # g @ b.T has a's rank unless a was 2D against a batched b
        if an == 2 and gb.ndim == 3:
            gb = sum_axes(gb, (0,))
        return gb

    def vjp_b(g: Tensor) -> Tensor:
        if an == 3 and bn == 2:
            # flatten the batch into rows: one GEMM, no per-item sum
            m, r, k = a.shape
            a2 = reshape(a, (m * r, k))
            g2 = reshape(g, (m * r, b.shape[1]))
            return matmul(transpose(a2, (1, 0)), g2)
        ga = matmul(transpose(a, (0, 2, 1) if an == 3 else (1, 0)), g)
        if bn == 2 and ga.ndim == 3:
            ga = sum_axes(ga, (0,))
        return ga

    return _node(out, (a, vjp_a), (b, vjp_b))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _node(a.value.reshape(shape), (a, lambda g: reshape(g, old)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), (a, lambda g: transpose(g, inv)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.asarray(a.value.sum()), (a, lambda g: expand_scalar(g, shape)))


def expand_scalar(a: Tensor, shape) -> Tensor:
    if a.size != 1:
        raise ValueError("expand_scalar: input must be scalar")
    shape = tuple(shape)
    out = np.broadcast_to(a.value.reshape(()), shape).copy()
    return _node(out, (a, sum_all))


def sum_axes(a: Tensor, axes, keepdims: bool = False) -> Tensor:
    axes = tuple(sorted(axes))
    shape = a.shape
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g: Tensor) -> Tensor:
        gk = g if keepdims else reshape(g, _keepdims_shape(shape, axes))
        return expand_axes(gk, shape, axes)

    return _node(np.asarray(out), (a, vjp))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def expand_axes(a: Tensor, shape, axes) -> Tensor:
    """Broadcast singleton axes out to ``shape``; adjoint of sum_axes."""
    axes = tuple(sorted(axes))
    shape = tuple(shape)
    if a.shape != _keepdims_shape(shape, axes):
        raise ValueError(f"expand_axes: {a.shape} does not match {shape} over {axes}")
    out = np.broadcast_to(a.value, shape).copy()
    return _node(out, (a, lambda g: sum_axes(g, axes, keepdims=True)))


def mean_all(a: Tensor) -> Tensor:
    return mul_const(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# nonlinearities


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    # value 0 takes the negative-side slope; measure-zero choice
    mask = np.where(a.value > 0.0, 1.0, slope)
    return _node(a.value * mask, (a, lambda g: mul_constarr(g, mask)))


def tanh(a: Tensor) -> Tensor:
    out_val = np.tanh(a.value)
    out = _node(out_val, (a, lambda g: _tanh_vjp(g)))

    def _tanh_vjp(g: Tensor) -> Tensor:
        return mul(g, add_const(neg(square(out)), 1.0))

    return out


def sigmoid(a: Tensor) -> Tensor:
    out_val = 1.0 / (1.0 + np.exp(-a.value))
    out = _node(out_val, (a, lambda g: _sig_vjp(g)))

    def _sig_vjp(g: Tensor) -> Tensor:
        return mul(g, mul(out, add_const(neg(out), 1.0)))

    return out


def exp(a: Tensor) -> Tensor:
    out_val = np.exp(a.value)
    out = _node(out_val, (a, lambda g: mul(g, out)))
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise ValueError("log: requires strictly positive input")
    return _node(np.log(a.value), (a, lambda g: mul_constarr(g, 1.0 / a.value)))


def pow_const(a: Tensor, p: float) -> Tensor:
    out = np.power(a.value, p)
    return _node(out, (a, lambda g: mul_constarr(g, p * np.power(a.value, p - 1.0))))


def sqrt_guard0(a: Tensor, zero_tol: float = 1e-12) -> Tensor:
    """Square root of a non-negative scalar-or-array with subgradient 0 at 0.

    Where the root is below ``zero_tol`` the backward factor is set to zero,
    the subgradient convention the gradient-norm penalty relies on at the
    origin.
    """
    v = np.maximum(a.value, 0.0)
    root = np.sqrt(v)
    factor = np.where(root < zero_tol, 0.0, 0.5 / np.maximum(root, zero_tol))
    return _node(root, (a, lambda g: mul_constarr(g, factor)))


# ---------------------------------------------------------------------------
# gather/scatter pair used by convolution layers

_GEOM_CACHE: dict[tuple, "ConvGeometry"] = {}


class ConvGeometry:
    """Index map for one (channels, side, kernel, stride, pad) window layout.

    ``idx`` has shape (out_h * out_w, channels * k * k) and addresses the
    zero-padded input flattened per example. Column order is (channel, ki,
    kj) row-major, matching the weight-matrix row layout.
    """

    __slots__ = ("c", "h", "w", "k", "stride", "pad", "hp", "wp", "oh", "ow", "idx")

    def __init__(self, c: int, h: int, w: int, k: int, stride: int, pad: int):
        self.c, self.h, self.w, self.k, self.stride, self.pad = c, h, w, k, stride, pad
        self.hp, self.wp = h + 2 * pad, w + 2 * pad
        self.oh = (self.hp - k) // stride + 1
        self.ow = (self.wp - k) // stride + 1
        oi = np.arange(self.oh) * stride
        oj = np.arange(self.ow) * stride
        ci = np.arange(c)
        ki = np.arange(k)
        kj = np.arange(k)
        rows = oi[:, None, None, None, None] + ki[None, None, None, :, None]
        cols = oj[None, :, None, None, None] + kj[None, None, None, None, :]
        chan = ci[None, None, :, None, None]
        flat = chan * (self.hp * self.wp) + rows * self.wp + cols
        flat = np.broadcast_to(flat, (self.oh, self.ow, c, k, k))
        self.idx = np.ascontiguousarray(flat.reshape(self.oh * self.ow, c * k * k))


def conv_geometry(c: int, h: int, w: int, k: int, stride: int, pad: int) -> ConvGeometry:
    key = (c, h, w, k, stride, pad)
    geom = _GEOM_CACHE.get(key)
    if geom is None:
        geom = _GEOM_CACHE[key] = ConvGeometry(c, h, w, k, stride, pad)
    return geom


def _im2col_value(v: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    b = v.shape[0]
    vp = np.zeros((b, geom.c, geom.hp, geom.wp))
    vp[:, :, geom.pad : geom.pad + geom.h, geom.pad : geom.pad + geom.w] = v
    return vp.reshape(b, -1)[:, geom.idx]


def _col2im_value(cols: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    b = cols.shape[0]
    per = geom.c * geom.hp * geom.wp
    offs = (np.arange(b) * per)[:, None]
    flat_idx = (geom.idx.reshape(1, -1) + offs).ravel()
    acc = np.bincount(flat_idx, weights=cols.ravel(), minlength=b * per)
    acc = acc.reshape(b, geom.c, geom.hp, geom.wp)
    return np.ascontiguousarray(
        acc[:, :, geom.pad : geom.pad + geom.h, geom.pad : geom.pad + geom.w]
    )


def im2col(a: Tensor, geom: ConvGeometry) -> Tensor:
    """Window gather: (b, c, h, w) -> (b, out_positions, c*k*k)."""
    if a.shape[1:] != (geom.c, geom.h, geom.w):
        raise ValueError(f"im2col: input {a.shape} does not match geometry")
    return _node(_im2col_value(a.value, geom), (a, lambda g: col2im(g, geom)))


def col2im(a: Tensor, geom: ConvGeometry) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add windows back onto the image."""
    expect = (geom.oh * geom.ow, geom.c * geom.k * geom.k)
    if a.shape[1:] != expect:
        raise ValueError(f"col2im: input {a.shape} does not match geometry")
    return _node(_col2im_value(a.value, geom), (a, lambda g: im2col(g, geom)))


# ---------------------------------------------------------------------------
# bias adds


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the trailing axis."""
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"add_bias: {a.shape} + {b.shape}")
    lead = tuple(range(a.ndim - 1))
    return _node(
        a.value + b.value,
        (a, lambda g: g),
        (b, lambda g: sum_axes(g, lead)),
    )


def add_channel_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along axis 1 of a (batch, channels, h, w) tensor."""
    if a.ndim != 4 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ValueError(f"add_channel_bias: {a.shape} + {b.shape}")
    return _node(
        a.value + b.value[None, :, None, None],
        (a, lambda g: g),
        (b, lambda g: sum_axes(g, (0, 2, 3))),
    )


# ---------------------------------------------------------------------------
# backward pass


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    The returned tensors are graph nodes themselves, so they can be fed back
    into further ops and differentiated once more. Tensors in ``wrt`` that
    the output does not depend on get zeros.
    """
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad: output must be scalar unless grad_output is given")
        seed = Tensor(np.ones_like(output.value))
    else:
        seed = grad_output

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    wrt_ids = {id(t) for t in wrt}
    needed: set[int] = set()
    for node in topo:  # parents precede children in topo order
        if id(node) in wrt_ids or any(id(p) in needed for p, _ in node._parents):
            needed.add(id(node))

    grads: dict[int, Tensor] = {id(output): seed}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or id(node) not in needed:
            continue
        for parent, vjp in node._parents:
            if not parent.requires_grad or id(parent) not in needed:
                continue
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else add(prev, contrib)

    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.value)))
    return out
