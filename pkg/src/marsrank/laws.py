"""Dual scaling laws: prediction and robust calibration.

Performance law::

    L(r_ve, r_llm, D) = A / (r_ve**alpha_m * r_llm**alpha_l * D**beta) + E

Convergence law, one per module::

    t(r, D) = k * r**gamma * D**delta + E

Both are fitted by minimizing the mean Huber loss of log-space residuals with
multi-start L-BFGS.  Coefficients are reparametrized so that the bounded
problem becomes unconstrained::

    A = exp(a), k = exp(kappa), E = s * softplus(e)
    exponent = lo + (hi - lo) * sigmoid(u)

``s`` is a fixed offset scale.  The fitter sets it to the median observation,
which turns ``e`` into roughly ``log(E / s)`` for small offsets and keeps the
offset's gradient on the same footing as the other parameters.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FitFailure, IdentifiabilityError, NumericRangeError, UsageError
from .optim import lbfgs
from .telemetry import CalibrationDataset, RankPair

log = logging.getLogger(__name__)

LAW_P = "P"
LAW_C = "C"


@dataclass(frozen=True)
class LawPCoefficients:
    A: float
    alpha_m: float
    alpha_l: float
    beta: float
    E: float

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError(f"A must be positive, got {self.A}")
        if not self.E >= 0:
            raise ValueError(f"E must be non-negative, got {self.E}")
        for name in ("alpha_m", "alpha_l", "beta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LawCCoefficients:
    module: str
    k: float
    gamma: float
    delta: float
    E: float

    def __post_init__(self):
        if self.module not in ("ve", "llm"):
            raise ValueError(f"module must be 've' or 'llm', got {self.module!r}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if not self.gamma < 0:
            raise ValueError(f"gamma must be negative, got {self.gamma}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.E >= 0:
            raise ValueError(f"E must be non-negative, got {self.E}")

    def to_dict(self) -> dict:
        return {"k": self.k, "gamma": self.gamma, "delta": self.delta, "E": self.E}


# --------------------------------------------------------------------------
# prediction


def _checked(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NumericRangeError(f"{what} is not finite")
    return value


def predict_loss(c: LawPCoefficients, ranks: RankPair, d_f: float) -> float:
    if not d_f > 0:
        raise ValueError("d_f must be positive")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_term = (
            math.log(c.A)
            - c.alpha_m * math.log(ranks.r_ve)
            - c.alpha_l * math.log(ranks.r_llm)
            - c.beta * math.log(d_f)
        )
        value = float(np.exp(log_term)) + c.E
    return float(_checked(value, f"predicted loss at {ranks}, D={d_f}"))


def predict_loss_array(c: LawPCoefficients, r_ve, r_llm, d_f) -> np.ndarray:
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        value = c.A / (np.power(r_ve, c.alpha_m) * np.power(r_llm, c.alpha_l) * np.power(d_f, c.beta)) + c.E
    return _checked(np.asarray(value, dtype=np.float64), "predicted loss")


def predict_convergence(c: LawCCoefficients, rank: float, d_f: float) -> float:
    if not rank > 0 or not d_f > 0:
        raise ValueError("rank and d_f must be positive")
    with np.errstate(over="ignore"):
        value = float(np.exp(math.log(c.k) + c.gamma * math.log(rank) + c.delta * math.log(d_f))) + c.E
    return float(_checked(value, f"predicted convergence for {c.module} at r={rank}, D={d_f}"))


def predict_convergence_array(c: LawCCoefficients, rank, d_f) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        value = c.k * np.power(rank, c.gamma) * np.power(d_f, c.delta) + c.E
    return _checked(np.asarray(value, dtype=np.float64), "predicted convergence")


# --------------------------------------------------------------------------
# loss


def huber(residual, delta: float):
    """Huber loss: quadratic inside ``|r| <= delta``, linear outside."""
    if not delta > 0:
        raise ValueError("huber delta must be positive")
    r = np.abs(np.asarray(residual, dtype=np.float64))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_derivative(residual, delta: float):
    return np.clip(residual, -delta, delta)


# --------------------------------------------------------------------------
# parametrization


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p / (1 - p))


def _softplus(e):
    return np.logaddexp(0.0, e)


def _inv_softplus(E: float) -> float:
    E = max(E, 1e-300)
    return E + math.log(-math.expm1(-E)) if E < 30 else E


@dataclass(frozen=True)
class FitConfig:
    """Fitting knobs.  Bounds are (lo, hi) intervals for the exponents."""

    huber_delta: float = 1e-3
    alpha_bounds: tuple[float, float] = (-5.0, 5.0)
    beta_bounds: tuple[float, float] = (-5.0, 5.0)
    gamma_bounds: tuple[float, float] = (-5.0, -1e-3)
    delta_bounds: tuple[float, float] = (1e-3, 5.0)
    grid_axes: tuple[str, ...] = ("a", "e")
    grid_size: int = 3
    max_starts: int = 243
    max_iter: int = 500
    gtol: float = 1e-8
    ftol: float = 1e-13
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    holdout_stride: int = 5
    # Fix E to this value instead of fitting it (e.g. 0.0 for a pure power law)
    fixed_E: float | None = None
    record_history: bool = False

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise UsageError("huber_delta must be positive")
        for name in ("alpha_bounds", "beta_bounds", "gamma_bounds", "delta_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise UsageError(f"{name} must satisfy lo < hi")
        if not self.gamma_bounds[1] < 0:
            raise UsageError("gamma_bounds must lie below zero")
        if not self.delta_bounds[0] > 0:
            raise UsageError("delta_bounds must lie above zero")
        if self.grid_size < 1 or self.max_starts < 1 or self.max_iter < 1:
            raise UsageError("grid_size, max_starts and max_iter must be positive")
        if self.holdout_stride < 2 and self.holdout_stride != 0:
            raise UsageError("holdout_stride must be 0 (disabled) or >= 2")
        if self.fixed_E is not None and self.fixed_E < 0:
            raise UsageError("fixed_E must be non-negative")

    def exponent_bounds(self, law: str) -> list[tuple[float, float]]:
        if law == LAW_P:
            return [self.alpha_bounds, self.alpha_bounds, self.beta_bounds]
        return [self.gamma_bounds, self.delta_bounds]


def _exponent_names(law: str) -> list[str]:
    return ["alpha_m", "alpha_l", "beta"] if law == LAW_P else ["gamma", "delta"]


def _check_law(law: str) -> str:
    if law not in (LAW_P, LAW_C):
        raise ValueError(f"law must be 'P' or 'C', got {law!r}")
    return law


def _feature_logs(law: str, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    width = 3 if law == LAW_P else 2
    if X.ndim != 2 or X.shape[1] != width:
        raise ValueError(f"law {law} expects an (n, {width}) feature array")
    return np.log(X)


def _signs(law: str) -> np.ndarray:
    # the performance law divides by its features, the convergence law multiplies
    return -np.ones(3) if law == LAW_P else np.ones(2)


def decode(
    law: str, params: np.ndarray, config: FitConfig = FitConfig(), module: str = "ve", e_scale: float = 1.0
):
    """Map an unconstrained parameter vector to coefficients."""
    law = _check_law(law)
    params = np.asarray(params, dtype=np.float64)
    bounds = config.exponent_bounds(law)
    exps = [lo + (hi - lo) * float(_sigmoid(u)) for (lo, hi), u in zip(bounds, params[1 : 1 + len(bounds)])]
    scale = float(np.exp(params[0]))
    E = config.fixed_E if config.fixed_E is not None else e_scale * float(_softplus(params[-1]))
    if law == LAW_P:
        return LawPCoefficients(scale, exps[0], exps[1], exps[2], E)
    return LawCCoefficients(module, scale, exps[0], exps[1], E)


def encode(coefs, config: FitConfig = FitConfig(), e_scale: float = 1.0) -> np.ndarray:
    """Inverse of :func:`decode` (exponents are clipped just inside their bounds)."""
    if isinstance(coefs, LawPCoefficients):
        law, scale, exps = LAW_P, coefs.A, [coefs.alpha_m, coefs.alpha_l, coefs.beta]
    else:
        law, scale, exps = LAW_C, coefs.k, [coefs.gamma, coefs.delta]
    us = [_logit((x - lo) / (hi - lo)) for (lo, hi), x in zip(config.exponent_bounds(law), exps)]
    params = [math.log(scale), *us]
    if config.fixed_E is None:
        params.append(_inv_softplus(coefs.E / e_scale))
    return np.array(params, dtype=np.float64)


def objective_and_gradient(
    law: str,
    params,
    X,
    y,
    delta: float | None = None,
    config: FitConfig = FitConfig(),
    e_scale: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Mean Huber loss of ``log(prediction) - log(y)`` and its exact gradient.

    ``X`` holds raw features: ``(r_ve, r_llm, d_eff)`` rows for the performance
    law, ``(rank, d_eff)`` rows for the convergence law.
    """
    law = _check_law(law)
    logs = _feature_logs(law, X)
    log_y = np.log(np.asarray(y, dtype=np.float64))
    delta = config.huber_delta if delta is None else delta
    return _objective(law, np.asarray(params, dtype=np.float64), logs, log_y, delta, config, e_scale)


def _objective(law, params, logs, log_y, delta, config, e_scale=1.0):
    bounds = config.exponent_bounds(law)
    n_exp = len(bounds)
    lo = np.array([b[0] for b in bounds])
    width = np.array([b[1] - b[0] for b in bounds])
    sig = _sigmoid(params[1 : 1 + n_exp])
    exps = lo + width * sig
    dexp_du = width * sig * (1.0 - sig)
    signs = _signs(law)

    log_power = params[0] + logs @ (signs * exps)
    fit_E = config.fixed_E is None
    if fit_E:
        e = params[-1]
        E = e_scale * float(_softplus(e))
    else:
        E = config.fixed_E
    with np.errstate(over="ignore", divide="ignore"):
        log_pred = np.logaddexp(log_power, math.log(E)) if E > 0 else log_power
    resid = log_pred - log_y
    if not np.all(np.isfinite(resid)):
        return math.inf, np.full(params.shape, np.nan)

    value = float(np.mean(huber(resid, delta)))
    psi = huber_derivative(resid, delta) / resid.size
    share = np.exp(log_power - log_pred)  # power term / prediction

    grad = np.empty_like(params)
    grad[0] = psi @ share
    grad[1 : 1 + n_exp] = (psi * share) @ logs * signs * dexp_du
    if fit_E:
        grad[-1] = (psi @ np.exp(-log_pred)) * e_scale * float(_sigmoid(e))
    return value, grad


# --------------------------------------------------------------------------
# fitting


@dataclass
class StartResult:
    params0: np.ndarray
    params: np.ndarray
    objective: float
    status: str
    converged: bool
    n_iter: int
    history: list[float] = field(default_factory=list)


@dataclass
class FitReport:
    coefficients: LawPCoefficients | LawCCoefficients
    objective_value: float
    starts_tried: int
    converged_starts: int
    holdout_mae_log: float
    r_squared_log: float
    n_train: int
    n_holdout: int
    params: np.ndarray
    e_scale: float = 1.0
    starts: list[StartResult] = field(repr=False, default_factory=list)

    @property
    def objective_values(self) -> list[float]:
        return [s.objective for s in self.starts]

    def summary(self) -> dict:
        return {
            "coefficients": self.coefficients.to_dict(),
            "objective_value": self.objective_value,
            "starts_tried": self.starts_tried,
            "converged_starts": self.converged_starts,
            "holdout_mae_log": self.holdout_mae_log,
            "r_squared_log": self.r_squared_log,
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
        }


def _distinct(values) -> int:
    return len(set(np.asarray(values).tolist()))


def check_identifiable(law: str, X: np.ndarray, y: np.ndarray) -> None:
    law = _check_law(law)
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3 if law == LAW_P else 2)
    if law == LAW_P:
        minimum, axes = 6, ("r_ve", "r_llm", "d_eff")
    else:
        minimum, axes = 4, ("rank", "d_eff")
    if len(y) < minimum:
        raise IdentifiabilityError(f"law {law} needs at least {minimum} observations, got {len(y)}", axis="count")
    for j, axis in enumerate(axes):
        if _distinct(X[:, j]) < 2:
            raise IdentifiabilityError(f"law {law}: all observations share one {axis} value", axis=axis)
    if not np.all(np.isfinite(y)) or np.any(np.asarray(y) <= 0):
        raise IdentifiabilityError(f"law {law}: observations must be finite and positive", axis="target")


def holdout_mask(n: int, stride: int) -> np.ndarray:
    """Every ``stride``-th observation (1-based) is held out; none when stride is 0."""
    mask = np.zeros(n, dtype=bool)
    if stride:
        mask[stride - 1 :: stride] = True
    return mask


def initial_grid(
    law: str, logs: np.ndarray, log_y: np.ndarray, config: FitConfig, e_scale: float = 1.0
) -> list[np.ndarray]:
    """Deterministic multi-start grid.

    Exponents start at the midpoints of their bound intervals.  The scale
    coefficient and the offset take ``grid_size`` values each, centred on
    values that roughly match the data at those exponents.  Axes listed in
    ``config.grid_axes`` are crossed; the product is strided down to
    ``max_starts``.
    """
    n_exp = len(config.exponent_bounds(law))
    exp_names = _exponent_names(law)
    signs = _signs(law)
    bounds = config.exponent_bounds(law)
    mid_exps = np.array([0.5 * (lo + hi) for lo, hi in bounds])
    log_base = logs @ (signs * mid_exps)
    y = np.exp(log_y)
    g = config.grid_size
    spread = np.linspace(-1.0, 1.0, g) if g > 1 else np.zeros(1)

    if config.fixed_E is None:
        fractions = np.linspace(0.05, 0.9, g) if g > 1 else np.array([0.5])
        E_values = fractions * float(np.min(y))
    else:
        E_values = np.array([config.fixed_E])

    axes: dict[str, list[float]] = {}
    axes["e"] = [_inv_softplus(E / e_scale) for E in E_values] if config.fixed_E is None else [math.nan]
    for name in exp_names:
        axes[name] = list(2.0 * spread) if name in config.grid_axes else [0.0]

    starts = []
    e_axis = axes["e"] if "e" in config.grid_axes else [axes["e"][len(axes["e"]) // 2]]
    for e0 in e_axis:
        E0 = config.fixed_E if config.fixed_E is not None else e_scale * float(_softplus(e0))
        resid = np.clip(y - E0, 1e-12 * y, None)
        a_centre = float(np.median(np.log(resid) - log_base))
        a_axis = list(a_centre + 2.0 * spread) if "a" in config.grid_axes else [a_centre]
        for a0, *us in itertools.product(a_axis, *(axes[name] for name in exp_names)):
            vec = [a0, *us]
            if config.fixed_E is None:
                vec.append(e0)
            starts.append(np.array(vec, dtype=np.float64))
    if len(starts) > config.max_starts:
        idx = np.linspace(0, len(starts) - 1, config.max_starts).round().astype(int)
        starts = [starts[i] for i in idx]
    assert all(s.size == 1 + n_exp + (config.fixed_E is None) for s in starts)
    return starts


def fit_law(
    law: str,
    X,
    y,
    config: FitConfig = FitConfig(),
    module: str = "ve",
    stage: str | None = None,
) -> FitReport:
    """Fit one law to raw observations with multi-start L-BFGS."""
    law = _check_law(law)
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3 if law == LAW_P else 2)
    y = np.asarray(y, dtype=np.float64)
    try:
        check_identifiable(law, X, y)
    except IdentifiabilityError as exc:
        raise IdentifiabilityError(str(exc), axis=exc.axis, stage=stage) from None

    logs = np.log(X)
    log_y = np.log(y)
    held = holdout_mask(len(y), config.holdout_stride)
    train = ~held
    logs_tr, log_y_tr = logs[train], log_y[train]
    e_scale = float(np.exp(np.median(log_y_tr)))

    def fg(p):
        return _objective(law, p, logs_tr, log_y_tr, config.huber_delta, config, e_scale)

    results: list[StartResult] = []
    for p0 in initial_grid(law, logs_tr, log_y_tr, config, e_scale):
        res = lbfgs(
            fg,
            p0,
            memory=config.memory,
            gtol=config.gtol,
            ftol=config.ftol,
            max_iter=config.max_iter,
            c1=config.c1,
            c2=config.c2,
            record_history=config.record_history,
        )
        results.append(
            StartResult(p0, res.x, res.fun, res.status, res.converged, res.n_iter, res.history)
        )

    finite = [r for r in results if math.isfinite(r.objective) and np.all(np.isfinite(r.params))]
    if not finite:
        raise FitFailure(f"law {law}: all {len(results)} starts diverged", stage=stage)
    converged = [r for r in finite if r.converged]
    pool = converged or finite
    if not converged:
        log.warning("law %s: no start met the convergence tolerances; using the best finite start", law)
    best = min(pool, key=lambda r: (r.objective, tuple(r.params.tolist())))
    try:
        coefs = decode(law, best.params, config, module, e_scale)
    except ValueError as exc:
        raise FitFailure(f"law {law}: best start decodes to invalid coefficients ({exc})", stage=stage) from None

    log_pred = _log_prediction(law, best.params, logs, config, e_scale)
    abs_err = np.abs(log_pred - log_y)
    holdout_mae = float(np.mean(abs_err[held])) if held.any() else 0.0
    ss_res = float(np.sum((log_pred - log_y) ** 2))
    ss_tot = float(np.sum((log_y - log_y.mean()) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0

    return FitReport(
        coefficients=coefs,
        objective_value=float(best.objective),
        starts_tried=len(results),
        converged_starts=len(converged),
        holdout_mae_log=holdout_mae,
        r_squared_log=r2,
        n_train=int(train.sum()),
        n_holdout=int(held.sum()),
        params=best.params,
        e_scale=e_scale,
        starts=results,
    )


def _log_prediction(law, params, logs, config, e_scale=1.0):
    n_exp = len(config.exponent_bounds(law))
    bounds = config.exponent_bounds(law)
    exps = np.array([lo + (hi - lo) * float(_sigmoid(u)) for (lo, hi), u in zip(bounds, params[1 : 1 + n_exp])])
    log_power = params[0] + logs @ (_signs(law) * exps)
    E = config.fixed_E if config.fixed_E is not None else e_scale * float(_softplus(params[-1]))
    return np.logaddexp(log_power, math.log(E)) if E > 0 else log_power


def fit_law_p(data: CalibrationDataset, config: FitConfig = FitConfig(), stage: str | None = "law_p") -> FitReport:
    X, y = data.perf_arrays()
    return fit_law(LAW_P, X, y, config, stage=stage)


def fit_law_c(
    data: CalibrationDataset, module: str, config: FitConfig = FitConfig(), stage: str | None = None
) -> FitReport:
    X, y = data.conv_arrays(module)
    return fit_law(LAW_C, X, y, config, module=module, stage=stage or f"law_c_{module}")


# --------------------------------------------------------------------------
# coefficients file


@dataclass(frozen=True)
class CoefficientSet:
    law_p: LawPCoefficients
    law_c_ve: LawCCoefficients
    law_c_llm: LawCCoefficients
    fit_meta: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "law_p": self.law_p.to_dict(),
            "law_c_ve": self.law_c_ve.to_dict(),
            "law_c_llm": self.law_c_llm.to_dict(),
            "fit_meta": self.fit_meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CoefficientSet":
        try:
            p = data["law_p"]
            law_p = LawPCoefficients(
                float(p["A"]), float(p["alpha_m"]), float(p["alpha_l"]), float(p["beta"]), float(p["E"])
            )
            cs = {}
            for module in ("ve", "llm"):
                c = data[f"law_c_{module}"]
                cs[module] = LawCCoefficients(module, float(c["k"]), float(c["gamma"]), float(c["delta"]), float(c["E"]))
        except (KeyError, TypeError) as exc:
            raise UsageError(f"malformed coefficients file: missing {exc}") from None
        except ValueError as exc:
            raise UsageError(f"malformed coefficients file: {exc}") from None
        return cls(law_p, cs["ve"], cs["llm"], dict(data.get("fit_meta", {})))

    def to_json(self) -> str:
        # json writes floats with repr(), the shortest string that round-trips exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CoefficientSet":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        from .files import atomic_write_text

        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CoefficientSet":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def coefficient_set_from_reports(reports: dict[str, FitReport], config: FitConfig) -> CoefficientSet:
    meta = {
        "huber_delta": config.huber_delta,
        "starts": {name: r.starts_tried for name, r in reports.items()},
        "objective_values": {name: r.objective_value for name, r in reports.items()},
    }
    return CoefficientSet(
        law_p=reports["law_p"].coefficients,
        law_c_ve=reports["law_c_ve"].coefficients,
        law_c_llm=reports["law_c_llm"].coefficients,
        fit_meta=meta,
    )


__all__ = [
    "LawPCoefficients",
    "LawCCoefficients",
    "FitConfig",
    "FitReport",
    "CoefficientSet",
    "predict_loss",
    "predict_loss_array",
    "predict_convergence",
    "predict_convergence_array",
    "huber",
    "objective_and_gradient",
    "fit_law",
    "fit_law_p",
    "fit_law_c",
    "encode",
    "decode",
]
