"""Robust loss and a small quasi-Newton minimizer used by the scaling-law fits.

The minimizer is plain BFGS on an inverse-Hessian approximation with an
Armijo backtracking line search and central finite-difference gradients.
Objectives are *batched*: they take an ``(m, n)`` array of parameter vectors
and return ``m`` objective values, so one gradient costs one call.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .exceptions import ConvergenceError, InvalidInputError

ARMIJO_C = 1e-4
SHRINK = 0.5
FD_STEP = 1e-6
MAX_ITER = 500
GTOL = 1e-8
_MIN_STEP = 1e-20


def huber_loss(residual, delta):
    """Huber penalty: quadratic within ``delta`` of zero, linear outside.

    Works elementwise on arrays; a scalar in gives a float out.

    >>> huber_loss(1e-3, 1e-3)
    5e-07
    """
    if not delta > 0 or not math.isfinite(delta):
        raise InvalidInputError(f"delta must be a positive finite real, got {delta}")
    r = np.asarray(residual, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("residual must be finite")
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    if out.ndim == 0:
        return float(out)
    return out


def _huber_unchecked(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


@dataclass
class BfgsResult:
    x: np.ndarray
    fun: float
    nit: int
    converged: bool
    # "gradient" (small gradient), "stalled" (no descent at machine precision)
    # or "maxiter"
    status: str
    start_index: int = 0
    history: list = field(default_factory=list, repr=False)


def fd_gradient(fun, x, step=FD_STEP):
    """Central-difference gradient of a batched objective at ``x``."""
    n = x.size
    h = step * np.maximum(1.0, np.abs(x))
    probes = np.repeat(x[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    probes[2 * idx, idx] += h
    probes[2 * idx + 1, idx] -= h
    vals = fun(probes)
    return (vals[0::2] - vals[1::2]) / (2.0 * h)


def _line_search(fun, x, f0, g, d):
    slope = float(g @ d)
    t = 1.0
    while t >= _MIN_STEP:
        x_new = x + t * d
        f_new = float(fun(x_new[None, :])[0])
        if math.isfinite(f_new) and f_new <= f0 + ARMIJO_C * t * slope:
            return t, x_new, f_new
        t *= SHRINK
    return None


def bfgs(fun, x0, max_iter=MAX_ITER, gtol=GTOL, step=FD_STEP):
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    f = float(fun(x[None, :])[0])
    if not math.isfinite(f):
        return BfgsResult(x, math.inf, 0, False, "nonfinite")
    g = fd_gradient(fun, x, step)
    H = np.eye(n)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            return BfgsResult(x, f, it - 1, True, "gradient")
        d = -H @ g
        if not float(g @ d) < 0:
            H = np.eye(n)
            d = -g
        found = _line_search(fun, x, f, g, d)
        if found is None and not np.array_equal(H, np.eye(n)):
            H = np.eye(n)
            d = -g
            found = _line_search(fun, x, f, g, d)
        if found is None:
            # Steepest descent cannot lower f at any representable step.
            return BfgsResult(x, f, it, True, "stalled")
        t, x_new, f_new = found
        g_new = fd_gradient(fun, x_new, step)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-300:
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
    return BfgsResult(x, f, max_iter, False, "maxiter")


def multistart_bfgs(fun, starts, max_iter=MAX_ITER, gtol=GTOL):
    """Run :func:`bfgs` from every start and keep the lowest objective.

    Ties go to the lower start index. If no start converged, raise
    :class:`ConvergenceError` carrying the best iterate anyway.
    """
    best = None
    any_converged = False
    for i, x0 in enumerate(starts):
        res = bfgs(fun, x0, max_iter=max_iter, gtol=gtol)
        res.start_index = i
        any_converged |= res.converged
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not math.isfinite(best.fun):
        raise ConvergenceError("no start produced a finite objective", best=best)
    if not any_converged:
        raise ConvergenceError(
            f"BFGS did not converge within {max_iter} iterations from any start",
            best=best,
            objective=best.fun,
        )
    return best
