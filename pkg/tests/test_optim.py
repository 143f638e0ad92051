import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize, rosen, rosen_der

from marsrank.optim import GTOL, NONFINITE, lbfgs, strong_wolfe


def rosen_fg(x):
    return rosen(x), rosen_der(x)


@pytest.mark.parametrize("n", [2, 5, 10])
def test_rosenbrock_matches_scipy(n):
    x0 = np.full(n, -1.2)
    x0[1::2] = 1.0
    ours = lbfgs(rosen_fg, x0, max_iter=2000)
    ref = minimize(rosen, x0, jac=rosen_der, method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-15})
    assert ours.status == GTOL
    assert np.allclose(ours.x, np.ones(n), atol=1e-6)
    assert np.allclose(ours.x, ref.x, atol=1e-5)
    assert ours.fun <= ref.fun + 1e-12


@given(st.integers(0, 10_000), st.integers(2, 8))
def test_quadratic_minimum(seed, n):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    H = M @ M.T + n * np.eye(n)
    b = rng.normal(size=n)
    res = lbfgs(lambda x: (0.5 * x @ H @ x - b @ x, H @ x - b), np.zeros(n), record_history=True)
    assert res.converged
    assert np.allclose(res.x, np.linalg.solve(H, b), atol=1e-7)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


@given(st.integers(0, 10_000))
def test_line_search_returns_strong_wolfe_step(seed):
    rng = np.random.default_rng(seed)
    n = 4
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)

    def fg(x):
        return 0.5 * x @ H @ x + np.sum(np.exp(0.1 * x)), H @ x + 0.1 * np.exp(0.1 * x)

    x = rng.normal(size=n) * 3
    f0, g0 = fg(x)
    p = -g0
    c1, c2 = 1e-4, 0.9
    found = strong_wolfe(fg, x, f0, g0, p, step=1.0, c1=c1, c2=c2)
    assert found is not None
    alpha, f, g = found
    assert f <= f0 + c1 * alpha * (g0 @ p)
    assert abs(g @ p) <= c2 * abs(g0 @ p)


def test_non_finite_start_reported():
    res = lbfgs(lambda x: (float("nan"), np.zeros_like(x)), np.zeros(2))
    assert res.status == NONFINITE and not res.converged


def test_overflow_region_is_backed_out_of():
    # exp blows up to inf for large steps; the search must bracket back
    def fg(x):
        with np.errstate(over="ignore"):
            e = np.exp(x)
        return float(np.sum(e - 50 * x)), e - 50

    res = lbfgs(fg, np.array([-30.0, 0.0]))
    assert res.converged
    assert np.allclose(res.x, np.log(50.0), atol=1e-6)


def test_max_iter_status():
    res = lbfgs(rosen_fg, np.array([-1.2, 1.0]), max_iter=3)
    assert res.status == "maxiter" and res.n_iter == 3
