"""Limited-memory BFGS with a strong-Wolfe line search.

Bounds are handled by the callers through smooth reparametrization, so the
minimizer itself is unconstrained.  The implementation follows the two-loop
recursion and the bracketing/zoom line search of Nocedal & Wright
(Numerical Optimization, 2nd ed., algorithms 7.4, 3.5 and 3.6).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FunGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]

# termination statuses
GTOL = "gtol"
FTOL = "ftol"
MAXITER = "maxiter"
LINESEARCH = "linesearch"
NONFINITE = "nonfinite"
CONVERGED_STATUSES = frozenset({GTOL, FTOL, LINESEARCH})


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    status: str
    history: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status in CONVERGED_STATUSES and math.isfinite(self.fun)


class _Counter:
    def __init__(self, fg: FunGrad):
        self.fg = fg
        self.n = 0

    def __call__(self, x):
        self.n += 1
        f, g = self.fg(x)
        return float(f), np.asarray(g, dtype=np.float64)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating two points with slopes, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def strong_wolfe(
    fg: FunGrad,
    x: np.ndarray,
    f0: float,
    g0: np.ndarray,
    p: np.ndarray,
    step: float = 1.0,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_step: float = 1e10,
    max_evals: int = 40,
):
    """Find a step satisfying the strong Wolfe conditions along ``p``.

    Returns ``(alpha, f, g)`` or ``None`` when no acceptable step was found.
    Non-finite trial values are treated as overshooting.
    """
    dphi0 = float(g0 @ p)
    if not dphi0 < 0:
        return None

    def phi(a):
        f, g = fg(x + a * p)
        return f, g, float(g @ p)

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi, evals):
        while evals < max_evals:
            trial = None
            if math.isfinite(f_hi) and math.isfinite(d_hi):
                trial = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            width = abs(hi - lo)
            if trial is None or not (min(lo, hi) + 0.1 * width <= trial <= max(lo, hi) - 0.1 * width):
                trial = 0.5 * (lo + hi)
            if width < 1e-16 * max(1.0, abs(lo)):
                break
            f, g, d = phi(trial)
            evals += 1
            if not math.isfinite(f) or f > f0 + c1 * trial * dphi0 or f >= f_lo:
                hi, f_hi, d_hi = trial, f, d
            else:
                if abs(d) <= -c2 * dphi0:
                    return trial, f, g
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = trial, f, d
        if lo > 0 and f_lo < f0:
            # sufficient decrease holds at lo; accept it rather than stall
            f, g, _ = phi(lo)
            return lo, f, g
        return None

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = step
    evals = 0
    while evals < max_evals:
        f, g, d = phi(a)
        evals += 1
        if not math.isfinite(f) or not math.isfinite(d):
            # overshoot into an overflow region: bracket between the last good point and here
            return zoom(a_prev, f_prev, d_prev, a, math.inf, math.nan, evals)
        if f > f0 + c1 * a * dphi0 or (evals > 1 and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, f, d, evals)
        if abs(d) <= -c2 * dphi0:
            return a, f, g
        if d >= 0:
            return zoom(a, f, d, a_prev, f_prev, d_prev, evals)
        a_prev, f_prev, d_prev = a, f, d
        a = min(2.0 * a, max_step)
    return None


def lbfgs(
    fg: FunGrad,
    x0,
    memory: int = 10,
    gtol: float = 1e-8,
    ftol: float = 0.0,
    max_iter: int = 500,
    c1: float = 1e-4,
    c2: float = 0.9,
    record_history: bool = False,
) -> OptimizeResult:
    """Minimize a smooth function given ``fg(x) -> (f, grad)``.

    Stops when the infinity norm of the gradient drops below ``gtol``, when an
    accepted step reduces ``f`` by no more than a relative ``ftol``, when the
    line search cannot make progress, or after ``max_iter`` iterations.
    """
    counter = _Counter(fg)
    x = np.array(x0, dtype=np.float64)
    f, g = counter(x)
    history = [f] if record_history else []
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        return OptimizeResult(x, f, g, 0, counter.n, NONFINITE, history)

    s_hist: deque[np.ndarray] = deque(maxlen=memory)
    y_hist: deque[np.ndarray] = deque(maxlen=memory)
    rho_hist: deque[float] = deque(maxlen=memory)
    status = MAXITER
    it = 0
    while it < max_iter:
        if np.max(np.abs(g)) < gtol:
            status = GTOL
            break

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            alpha = rho * (s @ q)
            alphas.append(alpha)
            q -= alpha * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y, rho), alpha in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            beta = rho * (y @ q)
            q += (alpha - beta) * s
        p = -q

        if not float(g @ p) < 0:
            # curvature memory went stale; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            p = -g
        step = 1.0 if s_hist else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))

        found = strong_wolfe(counter, x, f, g, p, step=step, c1=c1, c2=c2)
        if found is None and s_hist:
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            p = -g
            found = strong_wolfe(counter, x, f, g, p, step=min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300)), c1=c1, c2=c2)
        if found is None:
            status = LINESEARCH
            break

        alpha, f_new, g_new = found
        s_vec = alpha * p
        y_vec = g_new - g
        x = x + s_vec
        f_old = f
        f, g = f_new, g_new
        it += 1
        if record_history:
            history.append(f)
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * float(y_vec @ y_vec) and sy > 0:
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
        if f_old - f <= ftol * max(abs(f), abs(f_old)):
            status = FTOL
            break

    return OptimizeResult(x, f, g, it, counter.n, status, history)
