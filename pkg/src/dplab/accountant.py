"""Privacy accounting for the subsampled Gaussian mechanism.

Each private training step applies the Gaussian mechanism to a random
subsample of rate q. It incurs a Renyi-divergence bound eps'(alpha) per
integer order alpha; these bounds add linearly across steps and convert to
an (epsilon, delta) statement by minimizing over the order grid.

All logarithms are natural. Orders are the integers 2..256, where the
closed-form binomial expression is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

ALPHA_GRID: np.ndarray = np.arange(2, 257)


def rdp_sgm_step(q: float, sigma: float, alpha: int) -> float:
    """Per-step eps'(alpha) of the Gaussian mechanism on a rate-q sample.

    Evaluates, in log space,

        eps'(alpha) = log( sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
                           * exp(k(k-1) / (2 sigma^2)) ) / (alpha - 1)

    which is exact for integer alpha. Stable for alpha up to 256 and sigma
    down to about 0.3. q=1 reduces to alpha / (2 sigma^2) exactly.
    """
    if not (0.0 < q <= 1.0):
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    alpha = int(alpha)
    if alpha < 2:
        raise ValueError(f"alpha must be an integer >= 2, got {alpha}")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    k = np.arange(alpha + 1)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
        log_terms = (
            log_binom
            + (alpha - k) * math.log1p(-q)
            + k * math.log(q)
            + k * (k - 1) / (2.0 * sigma**2)
        )
        total = float(logsumexp(log_terms))
    # large finite bounds are legitimate (they just mean almost no privacy);
    # only an actually non-finite value is an internal overflow
    if not math.isfinite(total):
        raise OverflowError(
            f"rdp_sgm_step overflow at q={q}, sigma={sigma}, alpha={alpha}"
        )
    # the sum dominates the plain binomial expansion of 1, so it is >= 0;
    # clamp away negative rounding dust
    return max(0.0, total / (alpha - 1))


@dataclass
class RdpCurve:
    """Accumulated eps'(alpha) over an order grid, plus the step count."""

    eps: dict[int, float] = field(default_factory=dict)
    steps: int = 0

    @classmethod
    def zero(cls, orders: np.ndarray = ALPHA_GRID) -> "RdpCurve":
        return cls(eps={int(a): 0.0 for a in orders}, steps=0)

    def orders(self) -> list[int]:
        return list(self.eps)

    def copy(self) -> "RdpCurve":
        return RdpCurve(eps=dict(self.eps), steps=self.steps)


def compose(curve: RdpCurve, steps: int, q: float, sigma: float) -> RdpCurve:
    """Add ``steps`` identical sampled-Gaussian steps to the curve.

    Accumulates by repeated addition, one step at a time, so splitting a
    composition into parts gives bit-identical results to composing in one
    call; the stateful Accountant accumulates the same way.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return curve.copy()
    per = {a: rdp_sgm_step(q, sigma, a) for a in curve.eps}
    out = dict(curve.eps)
    for _ in range(steps):
        for a in out:
            out[a] += per[a]
    return RdpCurve(eps=out, steps=curve.steps + steps)


@dataclass(frozen=True)
class EpsilonDelta:
    """An (epsilon, delta) guarantee and the order that attained it."""

    epsilon: float
    delta: float
    alpha_star: int


def to_epsilon_delta(curve: RdpCurve, delta: float) -> EpsilonDelta:
    """Convert a curve to (epsilon, delta), minimizing over the order grid.

    epsilon = min over alpha of eps'(alpha) + log(1/delta) / (alpha - 1);
    ties go to the smallest attaining order.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not curve.eps:
        raise ValueError("empty order grid")
    log_inv_delta = -math.log(delta)
    best_eps = math.inf
    best_alpha = -1
    for a, e in curve.eps.items():
        cand = e + log_inv_delta / (a - 1)
        if cand < best_eps:
            best_eps = cand
            best_alpha = a
    return EpsilonDelta(epsilon=best_eps, delta=delta, alpha_star=best_alpha)


class Accountant:
    """Stateful budget tracker for one training run.

    Charges one sampled-Gaussian step per private critic step; generator
    steps are never charged. With noise_multiplier 0 the run is not
    private and epsilon is reported as infinity.

    Charging accumulates by the same repeated addition compose() uses, so
    any ledger row can be recomputed offline from (T, q, sigma) to the
    last bit via compose(RdpCurve.zero(orders), T, q, sigma).
    """

    def __init__(self, q: float, sigma: float, orders: np.ndarray = ALPHA_GRID):
        if not (0.0 < q <= 1.0):
            raise ValueError(f"q must lie in (0, 1], got {q}")
        if sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        self.q = q
        self.sigma = sigma
        self._orders = [int(a) for a in orders]
        self._steps = 0
        self._eps = {a: 0.0 for a in self._orders}
        if sigma > 0.0:
            self._per_step = {a: rdp_sgm_step(q, sigma, a) for a in self._orders}
        else:
            self._per_step = None

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def curve(self) -> RdpCurve:
        return RdpCurve(eps=dict(self._eps), steps=self._steps)

    def charge(self, steps: int = 1) -> None:
        if steps < 0:
            raise ValueError(f"steps must be >= 0, got {steps}")
        self._steps += steps
        if self._per_step is not None:
            for _ in range(steps):
                for a in self._eps:
                    self._eps[a] += self._per_step[a]

    def epsilon(self, delta: float) -> EpsilonDelta:
        if self._per_step is None:
            if not (0.0 < delta < 1.0):
                raise ValueError(f"delta must lie in (0, 1), got {delta}")
            return EpsilonDelta(epsilon=math.inf, delta=delta, alpha_star=-1)
        return to_epsilon_delta(self.curve, delta)

    def state(self) -> dict:
        """State for the checkpoint sidecar; enough to recompute epsilon."""
        return {"steps": self._steps, "q": self.q, "sigma": self.sigma}

    @classmethod
    def from_state(cls, state: dict, orders: np.ndarray = ALPHA_GRID) -> "Accountant":
        acc = cls(q=float(state["q"]), sigma=float(state["sigma"]), orders=orders)
        acc.charge(int(state["steps"]))
        return acc
