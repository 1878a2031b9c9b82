"""Dense BFGS with a strong-Wolfe line search.

The core routine minimizes; ``maximize`` negates.  ``_bfgs`` and its helpers
are plain Python so they accept any callable objective, and are also cloned
into a numba-compiled family (``bfgs_jit``) used inside the EM loop, where the
objective is itself a compiled function.
"""
from __future__ import annotations

import math
import types
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

__all__ = ["OptimSettings", "OptimResult", "maximize", "OptimizationError", "bfgs_jit"]

CONVERGED_GTOL = 0
CONVERGED_FTOL = 1
MAX_ITER = 2
LINE_SEARCH_FAILED = 3
NONFINITE_START = 4

REASONS = {
    CONVERGED_GTOL: "gradient norm below gtol",
    CONVERGED_FTOL: "relative objective change below ftol",
    MAX_ITER: "iteration limit reached",
    LINE_SEARCH_FAILED: "line search failed",
    NONFINITE_START: "objective not finite at start",
}


class OptimizationError(ArithmeticError):
    pass


@dataclass
class OptimSettings:
    gtol: float = 1e-6
    ftol: float = 1e-10
    max_iter: int = 200
    c1: float = 1e-4
    c2: float = 0.9


@dataclass
class OptimResult:
    omega_hat: np.ndarray
    objective: float
    n_iterations: int
    gradient_norm: float
    converged: bool
    reason: str = ""
    iterates: list = field(default_factory=list, repr=False)


def _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
    # minimizer of the cubic matching values and slopes at both ends
    if not math.isfinite(f_hi):
        return math.nan
    d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - d_lo * d_hi
    if not disc >= 0.0:
        return math.nan
    d2 = math.sqrt(disc)
    if a_hi < a_lo:
        d2 = -d2
    denom = d_hi - d_lo + 2.0 * d2
    if denom == 0.0:
        return math.nan
    return a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom


def _zoom(fg, x, p, f0, dphi0, args, c1, c2, a_lo, f_lo, d_lo, g_lo, a_hi, f_hi, d_hi):
    for _ in range(40):
        width = abs(a_hi - a_lo)
        a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        if not (min(a_lo, a_hi) + 0.1 * width <= a <= max(a_lo, a_hi) - 0.1 * width):
            a = 0.5 * (a_lo + a_hi)
        fa, ga = fg(x + a * p, *args)
        da = np.dot(ga, p)
        if not math.isfinite(fa):
            fa = math.inf
        if fa > f0 + c1 * a * dphi0 or fa >= f_lo:
            a_hi = a
            f_hi = fa
            d_hi = da
        else:
            if abs(da) <= -c2 * dphi0:
                return a, fa, ga, True
            if da * (a_hi - a_lo) >= 0.0:
                a_hi = a_lo
                f_hi = f_lo
                d_hi = d_lo
            a_lo = a
            f_lo = fa
            d_lo = da
            g_lo = ga
        if abs(a_hi - a_lo) <= 1e-14 * max(1.0, a_lo):
            break
    # best point with sufficient decrease, if the bracket ever produced one
    return a_lo, f_lo, g_lo, a_lo > 0.0


def _refine(fg, x, p, f0, dphi0, args, c1, c2, a, fa, ga):
    # one secant step on the slope; exact when the objective is quadratic
    da = np.dot(ga, p)
    curv = da - dphi0
    if not curv > 0.0:
        return a, fa, ga
    a_s = -a * dphi0 / curv
    if abs(a_s - a) <= 1e-3 * a:
        return a, fa, ga
    fs, gs = fg(x + a_s * p, *args)
    if (math.isfinite(fs) and fs <= fa and fs <= f0 + c1 * a_s * dphi0
            and abs(np.dot(gs, p)) <= -c2 * dphi0):
        return a_s, fs, gs
    return a, fa, ga


def _line_search(fg, x, p, f0, g0, dphi0, args, c1, c2):
    """Strong-Wolfe search along p; returns (alpha, f, g, ok)."""
    a_prev = 0.0
    f_prev = f0
    d_prev = dphi0
    g_prev = g0
    a = 1.0
    for it in range(40):
        fa, ga = fg(x + a * p, *args)
        da = np.dot(ga, p)
        if not math.isfinite(fa):
            fa = math.inf
        if fa > f0 + c1 * a * dphi0 or (it > 0 and fa >= f_prev):
            return _zoom(fg, x, p, f0, dphi0, args, c1, c2,
                         a_prev, f_prev, d_prev, g_prev, a, fa, da)
        if abs(da) <= -c2 * dphi0:
            return a, fa, ga, True
        if da >= 0.0:
            return _zoom(fg, x, p, f0, dphi0, args, c1, c2,
                         a, fa, da, ga, a_prev, f_prev, d_prev)
        a_prev = a
        f_prev = fa
        d_prev = da
        g_prev = ga
        a = 2.0 * a
    return a_prev, f_prev, g_prev, a_prev > 0.0


def _bfgs(fg, x0, args, h0, gtol, ftol, max_iter, c1, c2, trace):
    """Minimize ``fg(x, *args) -> (f, grad)``.

    ``h0`` is the starting inverse Hessian; an all-zero matrix requests the
    identity scaled by 1 / (1 + |g0|).  Returns (x, f, g, H, n_iter, status).
    """
    n = x0.shape[0]
    x = x0.copy()
    f, g = fg(x, *args)
    if not math.isfinite(f):
        return x, f, g, h0, 0, NONFINITE_START
    if np.all(h0 == 0.0):
        h = np.eye(n) / (1.0 + math.sqrt(np.dot(g, g)))
    else:
        h = h0.copy()
    if trace is not None:
        trace.append((x.copy(), f))
    status = MAX_ITER
    it = 0
    while it < max_iter:
        if n == 0 or np.max(np.abs(g)) < gtol:
            status = CONVERGED_GTOL
            break
        p = -(h @ g)
        dphi0 = np.dot(g, p)
        if not dphi0 < 0.0:
            # lost descent; restart from the scaled identity
            h = np.eye(n) / (1.0 + math.sqrt(np.dot(g, g)))
            p = -(h @ g)
            dphi0 = np.dot(g, p)
        alpha, f_new, g_new, ok = _line_search(fg, x, p, f, g, dphi0, args, c1, c2)
        if not ok:
            status = LINE_SEARCH_FAILED
            break
        alpha, f_new, g_new = _refine(fg, x, p, f, dphi0, args, c1, c2, alpha, f_new, g_new)
        it += 1
        s = alpha * p
        y = g_new - g
        x = x + s
        rel = abs(f - f_new) / max(abs(f), abs(f_new), 1.0)
        f = f_new
        g = g_new
        if trace is not None:
            trace.append((x.copy(), f))
        sy = np.dot(s, y)
        if sy > 1e-12 * math.sqrt(np.dot(s, s) * np.dot(y, y)):
            rho = 1.0 / sy
            hy = h @ y
            h = h + ((sy + np.dot(y, hy)) * rho * rho) * np.outer(s, s) \
                - rho * (np.outer(hy, s) + np.outer(s, hy))
        if np.max(np.abs(g)) < gtol:
            status = CONVERGED_GTOL
            break
        if rel < ftol:
            status = CONVERGED_FTOL
            break
    return x, f, g, h, it, status


def _compile_family():
    # Clone the plain functions with a globals dict pointing at compiled
    # siblings, so one source serves both the Python and numba paths.
    glb = dict(globals())

    def clone(fn):
        return numba.njit(types.FunctionType(fn.__code__, glb, fn.__name__), nogil=True)

    for fn in (_cubic_min, _zoom, _line_search, _refine):
        glb[fn.__name__] = clone(fn)
    return clone(_bfgs)


bfgs_jit = _compile_family()


def maximize(objective: Callable, gradient: Callable, start,
             settings: Optional[OptimSettings] = None, record: bool = False
             ) -> OptimResult:
    """Maximize ``objective`` from ``start`` with BFGS.

    ``gradient`` must be the gradient of ``objective``.  A failed line search
    returns the best iterate so far with ``converged=False``.  With
    ``record=True`` the accepted iterates and objective values are kept.
    """
    settings = settings or OptimSettings()
    x0 = np.array(start, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x0)):
        raise OptimizationError("start must be finite")

    def fg(x):
        return -float(objective(x)), -np.asarray(gradient(x), dtype=float).reshape(-1)

    trace = [] if record else None
    x, f, g, _, n_iter, status = _bfgs(
        fg, x0, (), np.zeros((x0.size, x0.size)), settings.gtol, settings.ftol,
        settings.max_iter, settings.c1, settings.c2, trace)
    if status == NONFINITE_START:
        raise OptimizationError("objective is not finite at the starting point")
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    # an ftol stop counts as converged only if the gradient is also small
    return OptimResult(
        omega_hat=x,
        objective=-float(f),
        n_iterations=int(n_iter),
        gradient_norm=gnorm,
        converged=gnorm < settings.gtol,
        reason=REASONS[status],
        iterates=[(xi, -fi) for xi, fi in trace] if record else [],
    )
