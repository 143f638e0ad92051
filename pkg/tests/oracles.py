"""Independent reference implementations used by the tests.

The oracles never call into the package's solvers; formulas are written
out directly so a shared bug cannot hide.  ``random_problem`` only builds
inputs.
"""

import math

import mpmath
import numpy as np

from marsrank.laws import decode, predict_convergence_array, predict_loss_array


def law_c(k, gamma, delta, E, rank, d):
    return k * rank**gamma * d**delta + E


def bisect_balanced_rank(c_ve, c_llm, r_llm, d, iters=400):
    """Root of t_ve(r) = t_llm(r_llm) by bisection on log r, or None if none exists."""
    target = law_c(c_llm.k, c_llm.gamma, c_llm.delta, c_llm.E, r_llm, d)
    if target - c_ve.E <= 0:
        return None

    def f(x):
        # t_ve is decreasing in r, so f is decreasing in x = log r
        return c_ve.k * math.exp(c_ve.gamma * x) * d**c_ve.delta + c_ve.E - target

    lo, hi = -1.0, 1.0
    while f(lo) <= 0:
        lo *= 2
    while f(hi) >= 0:
        hi *= 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def round_half_up_clamp(r, r_min, r_max):
    return min(max(int(math.floor(r + 0.5)), r_min), r_max)


def patience_oracle(values, patience):
    """Early stopping by definition, with no running state.

    The run stops at the first index i that is a strict prefix minimum and is
    followed by ``patience`` values none of which is lower.  Returns
    (converged, index of t).
    """
    n = len(values)
    for i in range(n):
        if i > 0 and not values[i] < min(values[:i]):
            continue
        window = values[i + 1 : i + 1 + patience]
        if len(window) == patience and min(window) >= values[i]:
            return True, i
    return False, values.index(min(values))


def random_problem(rng, law, n=12):
    """Random parameters with observations scattered around their prediction."""
    if law == "P":
        X = np.column_stack([rng.integers(1, 257, n), rng.integers(1, 257, n), rng.uniform(100, 10000, n)])
        params = np.concatenate([[rng.normal(2, 1)], rng.normal(0, 0.3, 3), [rng.normal(0, 1)]])
    else:
        X = np.column_stack([rng.integers(1, 257, n), rng.uniform(100, 10000, n)])
        params = np.concatenate([[rng.normal(5, 1)], rng.normal(0, 1, 2), [rng.normal(0, 1)]])
    e_scale = float(np.exp(rng.normal(1 if law == "P" else 5, 1)))
    c = decode(law, params, e_scale=e_scale)
    pred = predict_loss_array(c, *X.T) if law == "P" else predict_convergence_array(c, *X.T)
    y = pred * np.exp(rng.normal(0, 0.3, n))
    return params, X, y, e_scale


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def mp_objective(law, params, X, y, delta, bounds, e_scale):
    """Mean Huber loss of log residuals, evaluated in mpmath at the current precision."""
    mp = mpmath
    p = [mp.mpf(v) for v in params]
    exps = [mp.mpf(lo) + (mp.mpf(hi) - mp.mpf(lo)) / (1 + mp.exp(-u)) for (lo, hi), u in zip(bounds, p[1:-1])]
    E = mp.mpf(e_scale) * mp.log(1 + mp.exp(p[-1]))
    sign = -1 if law == "P" else 1
    total = mp.mpf(0)
    for row, obs in zip(X, y):
        power = mp.exp(p[0])
        for x, a in zip(row, exps):
            power *= mp.mpf(float(x)) ** (sign * a)
        r = abs(mp.log(power + E) - mp.log(mp.mpf(float(obs))))
        total += r * r / 2 if r <= delta else delta * (r - mp.mpf(delta) / 2)
    return total / len(y)


def mp_fd_gradient(law, params, X, y, delta, bounds, e_scale, h="1e-20", dps=60):
    """Central differences on the high-precision objective; truncation and rounding are both negligible."""
    with mpmath.workdps(dps):
        h = mpmath.mpf(h)
        g = np.zeros(len(params))
        for i in range(len(params)):
            up = [mpmath.mpf(float(v)) for v in params]
            dn = list(up)
            up[i] += h
            dn[i] -= h
            f_up = mp_objective(law, up, X, y, delta, bounds, e_scale)
            f_dn = mp_objective(law, dn, X, y, delta, bounds, e_scale)
            g[i] = float((f_up - f_dn) / (2 * h))
    return g
