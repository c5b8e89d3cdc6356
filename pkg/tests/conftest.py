"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from dplab.nets import ParamSet

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    # repeat the per-criterion verdicts after the run, uncaptured
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(got: float, want: float) -> float:
    return abs(got - want) / max(abs(want), 1e-300)


def central_diff_scalar(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = f(x)
        xf[i] = orig - h
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return out


def central_diff_params(f, params: ParamSet, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function of a ParamSet."""
    grads = {}
    for name in params.names():
        base = params[name]
        g = np.zeros_like(base)
        gf = g.reshape(-1)
        bf = base.reshape(-1)
        for i in range(bf.size):
            orig = bf[i]
            bf[i] = orig + h
            hi = f(params)
            bf[i] = orig - h
            lo = f(params)
            bf[i] = orig
            gf[i] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_grad_err(got: dict[str, np.ndarray], want: dict[str, np.ndarray]) -> float:
    """Relative error of the concatenated gradient vector.

    A global norm avoids blowing up rounding noise on leaves whose true
    gradient happens to be exactly zero.
    """
    g = np.concatenate([np.ravel(got[k]) for k in sorted(got)])
    w = np.concatenate([np.ravel(want[k]) for k in sorted(want)])
    return float(np.linalg.norm(g - w)) / max(float(np.linalg.norm(w)), 1e-12)
