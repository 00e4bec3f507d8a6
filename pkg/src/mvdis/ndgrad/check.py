"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


@dataclass
class GradCheckReport:
    tol: float
    errors: list[float] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors)

    def __bool__(self) -> bool:
        return self.passed


def _value(fn: Callable[[], Tensor]) -> float:
    out = fn()
    val = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(val):
        raise NonFiniteError("gradient_check: function value is not finite")
    return val


def numeric_gradient(fn: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` with respect to every entry of ``p``."""
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = _value(fn)
        flat[i] = old - h
        down = _value(fn)
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
                   h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of a scalar ``fn()`` against central differences.

    ``fn`` is called with no arguments and must read the current values of
    ``params``; it has to be deterministic (fix any RNG inside it).  The
    per-parameter error is max|g_ad - g_fd| / (max|g_ad| + max|g_fd| + 1e-12),
    with maxima over the entries of that parameter tensor.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    with Tape() as tape:
        out = fn()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("gradient_check: function value is not finite")
    analytic = tape.gradient(out, params)
    report = GradCheckReport(tol=tol)
    for p in params:
        ga = analytic[p]
        gf = numeric_gradient(fn, p, h)
        if ga.size == 0:
            report.errors.append(0.0)
            continue
        err = np.abs(ga - gf).max() / (np.abs(ga).max() + np.abs(gf).max() + 1e-12)
        report.errors.append(float(err))
    return report
