"""Vectorised inversion of increasing cumulative-hazard functions."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConvergenceError

# F(x, idx) -> (value, slope) evaluated for the elements ``idx``
CumFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def solve_increasing(
    func: CumFn,
    lo: np.ndarray,
    hi: np.ndarray,
    target: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> np.ndarray:
    """Solve ``func(x) = target`` elementwise on brackets ``[lo, hi]``.

    Requires ``func(lo) <= target <= func(hi)``. A Newton step using the
    supplied slope is taken when it lands strictly inside the current
    bracket; after two iterations in a row that fail to halve the bracket
    the next step is a bisection. Stops at ``|func(x) - target| <= tol``
    or when the bracket has collapsed to a few ulps.
    """
    lo = np.array(lo, dtype=float, copy=True).ravel()
    hi = np.array(hi, dtype=float, copy=True).ravel()
    target = np.asarray(target, dtype=float).ravel()
    x = 0.5 * (lo + hi)
    width_prev = hi - lo
    nslow = np.zeros(lo.size, dtype=np.int8)
    act = np.arange(lo.size)
    for _ in range(max_iter):
        if act.size == 0:
            return x
        xa = x[act]
        val, der = func(xa, act)
        diff = val - target[act]
        if not np.all(np.isfinite(diff)):
            raise ConvergenceError("non-finite cumulative hazard during inversion")
        below = diff < 0
        l = np.where(below, xa, lo[act])
        h = np.where(below, hi[act], xa)
        lo[act], hi[act] = l, h
        width = h - l
        done = (np.abs(diff) <= tol) | (width <= 4 * np.spacing(np.maximum(np.abs(h), 1.0)))
        slow = np.where(width > 0.5 * width_prev[act], nslow[act] + 1, 0)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            newton = xa - diff / der
        use_newton = (der > 0) & (newton > l) & (newton < h) & (slow < 2)
        nslow[act] = np.where(use_newton, slow, 0)
        width_prev[act] = width
        x[act] = np.where(done, xa, np.where(use_newton, newton, 0.5 * (l + h)))
        act = act[~done]
    raise ConvergenceError("inversion did not converge")
