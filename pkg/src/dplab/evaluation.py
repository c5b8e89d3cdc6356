"""Classifier training and inception-score computation.

The score of an image set is exp of the mean, over images, of the KL
divergence between the classifier's conditional class distribution and
the marginal over the evaluated split. It ranges from 1 (all conditionals
equal the marginal) to the class count M (one-hot conditionals, balanced
marginal). Natural logarithms throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nets, tensor as T
from .nets import Conv2d, Dense, Flatten, LeakyRelu, Network, ParamSet
from .dp_optim import adam_update, init_adam


class MissingClassError(ValueError):
    """A class label is absent from the training data."""


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierModel:
    """A trained small CNN: architecture handle, parameters, metadata."""

    net: Network
    params: ParamSet
    side: int
    n_classes: int
    val_accuracy: float


def build_classifier(side: int, n_classes: int = 10) -> Network:
    """Two strided conv layers plus a dense head, about 10^5 parameters."""
    s1 = (side + 2 * 2 - 5) // 2 + 1
    s2 = (s1 + 2 * 2 - 5) // 2 + 1
    return Network(
        "classifier",
        [
            Conv2d("c1", 1, 32, side=side),
            LeakyRelu("a1", 0.2),
            Conv2d("c2", 32, 64, side=s1),
            LeakyRelu("a2", 0.2),
            Flatten("f"),
            Dense("head", 64 * s2 * s2, n_classes),
        ],
        input_shape=(1, side, side),
    )


def _log_softmax(logits: T.Tensor) -> T.Tensor:
    # shifting by the detached rowwise max leaves the gradient exact
    zmax = logits.value.max(axis=1, keepdims=True)
    shifted = T.add_constarr(logits, -np.broadcast_to(zmax, logits.shape))
    lse = T.log(T.sum_axes(T.exp(shifted), (1,), keepdims=True))
    return T.sub(shifted, T.expand_axes(lse, logits.shape, (1,)))


def _cross_entropy(logits: T.Tensor, onehot: np.ndarray) -> T.Tensor:
    logp = _log_softmax(logits)
    picked = T.mul_constarr(logp, onehot)
    return T.neg(T.sum_axes(picked, (1,)))  # (batch,)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(
    train: "LabeledDataLike",
    val: "LabeledDataLike",
    seed: int,
    n_classes: int = 10,
    epochs: int = 4,
    batch_size: int = 128,
    lr: float = 1e-3,
) -> ClassifierModel:
    """Train the small CNN with plain (non-private) Adam.

    Deterministic given the seed. Raises MissingClassError when any of the
    ``n_classes`` labels has no training example.
    """
    present = np.unique(np.asarray(train.labels))
    missing = sorted(set(range(n_classes)) - set(int(c) for c in present))
    if missing:
        raise MissingClassError(f"classes absent from training data: {missing}")
    side = train.images.shape[2]
    net = build_classifier(side, n_classes)
    rng = np.random.default_rng(seed)
    params = net.init_params(rng)
    state = init_adam(params)
    eye = np.eye(n_classes)
    n = train.images.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            idx = order[lo : lo + batch_size]
            xb = train.images[idx]
            onehot = eye[train.labels[idx]]
            _, rec = nets.batch_mean_grad(
                lambda out: _cross_entropy(out, onehot), net, params, xb
            )
            params, state = adam_update(params, rec.grads, state, lr)
    acc = accuracy(net, params, val.images, val.labels)
    return ClassifierModel(
        net=net, params=params, side=side, n_classes=n_classes, val_accuracy=acc
    )


def accuracy(
    net: Network, params: ParamSet, images: np.ndarray, labels: np.ndarray, batch: int = 256
) -> float:
    hits = 0
    for lo in range(0, images.shape[0], batch):
        logits = nets.forward(net, params, images[lo : lo + batch])
        hits += int(np.sum(logits.argmax(axis=1) == labels[lo : lo + batch]))
    return hits / images.shape[0]


def predict_probs(model: ClassifierModel, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Class distributions P(k|x), one row per image, rows summing to 1."""
    rows = []
    for lo in range(0, images.shape[0], batch):
        logits = nets.forward(model.net, model.params, images[lo : lo + batch])
        rows.append(softmax_probs(logits))
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# divergence and score


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Sum of p * (log p - log q) with the 0 log 0 = 0 convention.

    Raises when p puts mass where q has none; that case is an infinite
    divergence and is surfaced, never clamped.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    if np.any(p < 0.0) or np.any(q < 0.0):
        raise ValueError("distributions must be non-negative")
    support = p > 0.0
    if np.any(q[support] == 0.0):
        raise ValueError("infinite divergence: p has mass where q is zero")
    ps = p[support]
    return float(np.sum(ps * (np.log(ps) - np.log(q[support]))))


@dataclass(frozen=True)
class IsResult:
    """Inception score: mean and standard deviation over equal splits."""

    mean: float
    std: float
    splits: int
    split_scores: tuple[float, ...]


def inception_score_from_probs(probs: np.ndarray, splits: int = 10) -> IsResult:
    """Score a matrix of class distributions (one row per image).

    Per split: s = exp(mean over images of KL(P(k|x) || P(k))) with P(k)
    the marginal of that split. Returns mean and population std over the
    splits.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-D, got {probs.shape}")
    n, m = probs.shape
    if splits < 1:
        raise ValueError(f"splits must be >= 1, got {splits}")
    if n < splits:
        raise ValueError(f"need at least {splits} images, got {n}")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("each probability row must sum to 1 within 1e-9")
    scores = []
    for i in range(splits):
        part = probs[i * n // splits : (i + 1) * n // splits]
        # fsum is exactly rounded, so reordering the rows of a split cannot
        # change the marginal or the mean KL by even one ulp
        marginal = np.array([math.fsum(part[:, k]) for k in range(m)]) / part.shape[0]
        kls = [kl_divergence(row, marginal) for row in part]
        scores.append(math.exp(math.fsum(kls) / len(kls)))
    scores_arr = np.array(scores)
    return IsResult(
        mean=float(scores_arr.mean()),
        std=float(scores_arr.std()),
        splits=splits,
        split_scores=tuple(scores),
    )


def inception_score(
    model: ClassifierModel, images: np.ndarray, splits: int = 10
) -> IsResult:
    """Inception score of an image set under a trained classifier."""
    if images.shape[0] < splits * model.n_classes:
        raise ValueError(
            f"need at least splits*classes = {splits * model.n_classes} images, "
            f"got {images.shape[0]}"
        )
    return inception_score_from_probs(predict_probs(model, images), splits)
