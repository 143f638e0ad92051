"""Synthetic fine-tuning runs with known ground truth.

The final perplexity of a run is the performance law inflated by a
convergence-gap penalty::

    L_true = L_law(r_ve, r_llm, D) * (1 + lambda * g**p)
    g = |t_ve - t_llm| / max(t_ve, t_llm)

with ``t_ve`` and ``t_llm`` from the true convergence laws.  Curves are
exponential approaches that reach their floor exactly at the convergence step,
so the patience detector fires there.  All randomness comes from Philox
streams keyed by ``(seed, run_seed, stream)``; draw ``i`` of a stream belongs
to evaluation ``i``, which makes every run independent of generation order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import SimulationConfigError
from .laws import (
    LawCCoefficients,
    LawPCoefficients,
    predict_convergence,
    predict_loss,
)
from .telemetry import RankPair, TelemetryRun, detect_convergence

MAX_STEPS = 2**31
PATIENCE = 5
_STREAM_PPL = 1
_STREAM_CONV = 2


@dataclass(frozen=True)
class SimConfig:
    true_law_p: LawPCoefficients
    true_law_c_ve: LawCCoefficients
    true_law_c_llm: LawCCoefficients
    gap_penalty_lambda: float = 0.3
    gap_penalty_power: float = 1.0
    noise_sigma_log: float = 0.02
    conv_noise_sigma_log: float = 0.02
    batch_size: int = 8
    eval_interval: int = 16
    seed: int = 42
    # starting perplexity as a multiple of the run's final perplexity
    init_ppl_factor: float = 2.0
    progress_floor: float = 0.01
    patience: int = PATIENCE

    def __post_init__(self):
        if self.true_law_c_ve.module != "ve" or self.true_law_c_llm.module != "llm":
            raise SimulationConfigError("convergence laws must be labelled 've' and 'llm'")
        for name in ("gap_penalty_lambda", "noise_sigma_log", "conv_noise_sigma_log"):
            if not getattr(self, name) >= 0:
                raise SimulationConfigError(f"{name} must be non-negative")
        if not self.gap_penalty_power > 0:
            raise SimulationConfigError("gap_penalty_power must be positive")
        if self.batch_size < 1 or self.eval_interval < 1 or self.patience < 1:
            raise SimulationConfigError("batch_size, eval_interval and patience must be positive")
        if not 0 <= self.seed < 2**64:
            raise SimulationConfigError("seed must be a 64-bit unsigned integer")
        if not self.init_ppl_factor >= 1:
            raise SimulationConfigError("init_ppl_factor must be >= 1")
        if not self.progress_floor > 0:
            raise SimulationConfigError("progress_floor must be positive")

    def with_overrides(self, **kwargs) -> "SimConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_dict(self) -> dict:
        return {
            "true_law_p": self.true_law_p.to_dict(),
            "true_law_c_ve": self.true_law_c_ve.to_dict(),
            "true_law_c_llm": self.true_law_c_llm.to_dict(),
            "gap_penalty_lambda": self.gap_penalty_lambda,
            "gap_penalty_power": self.gap_penalty_power,
            "noise_sigma_log": self.noise_sigma_log,
            "conv_noise_sigma_log": self.conv_noise_sigma_log,
            "batch_size": self.batch_size,
            "eval_interval": self.eval_interval,
            "seed": self.seed,
            "init_ppl_factor": self.init_ppl_factor,
            "progress_floor": self.progress_floor,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        p = d.pop("true_law_p")
        cve = d.pop("true_law_c_ve")
        cllm = d.pop("true_law_c_llm")
        return cls(
            true_law_p=LawPCoefficients(**p),
            true_law_c_ve=LawCCoefficients("ve", **{k: v for k, v in cve.items() if k != "module"}),
            true_law_c_llm=LawCCoefficients("llm", **{k: v for k, v in cllm.items() if k != "module"}),
            **d,
        )


def scenario_s1(**overrides) -> SimConfig:
    """The canonical fixture: a fast-converging VE and a slow LLM."""
    cfg = SimConfig(
        true_law_p=LawPCoefficients(A=12.0, alpha_m=0.08, alpha_l=0.22, beta=0.28, E=1.6),
        true_law_c_ve=LawCCoefficients("ve", k=900.0, gamma=-0.55, delta=0.5, E=60.0),
        true_law_c_llm=LawCCoefficients("llm", k=2600.0, gamma=-0.35, delta=0.55, E=140.0),
        gap_penalty_lambda=0.3,
        gap_penalty_power=1.0,
        noise_sigma_log=0.02,
        conv_noise_sigma_log=0.02,
        batch_size=8,
        eval_interval=16,
        seed=42,
    )
    return cfg.with_overrides(**overrides)


S1_GRID_VALUES = (8, 16, 32, 64)
S1_D_TIERS = (2**9, 2**10, 2**11, 2**12, 2**13)


def rank_grid(values: Sequence[int]) -> list[RankPair]:
    """All (r_ve, r_llm) pairs, r_llm-major."""
    return [RankPair(r_ve, r_llm) for r_llm in values for r_ve in values]


# --------------------------------------------------------------------------
# ground truth


def true_times(cfg: SimConfig, ranks: RankPair, d_f: float) -> tuple[float, float]:
    return (
        predict_convergence(cfg.true_law_c_ve, ranks.r_ve, d_f),
        predict_convergence(cfg.true_law_c_llm, ranks.r_llm, d_f),
    )


def normalized_gap(t_ve: float, t_llm: float) -> float:
    return abs(t_ve - t_llm) / max(t_ve, t_llm)


def true_perplexity(cfg: SimConfig, ranks: RankPair, d_f: float) -> float:
    """Noiseless final perplexity: the performance law times the gap penalty."""
    base = predict_loss(cfg.true_law_p, ranks, d_f)
    if cfg.gap_penalty_lambda == 0:
        return base
    g = normalized_gap(*true_times(cfg, ranks, d_f))
    return base * (1.0 + cfg.gap_penalty_lambda * g**cfg.gap_penalty_power)


@dataclass(frozen=True)
class OracleRow:
    ranks: RankPair
    true_perplexity: float
    t_ve: float
    t_llm: float


def oracle_grid(cfg: SimConfig, grid: Sequence[RankPair], d_f: float) -> tuple[RankPair, list[OracleRow]]:
    """Evaluate every pair noiselessly; the exact argmin is the brute-force optimum."""
    if not grid:
        raise ValueError("grid must not be empty")
    table = []
    for ranks in grid:
        t_ve, t_llm = true_times(cfg, ranks, d_f)
        table.append(OracleRow(ranks, true_perplexity(cfg, ranks, d_f), t_ve, t_llm))
    best = min(table, key=lambda row: (row.true_perplexity, row.ranks.r_llm, row.ranks.r_ve))
    return best.ranks, table


# --------------------------------------------------------------------------
# curves


def derive_run_seed(ranks: RankPair, d_f: int) -> int:
    digest = hashlib.blake2b(f"{ranks.r_ve},{ranks.r_llm},{d_f}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _stream(cfg: SimConfig, run_seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, run_seed, stream])))


def _decay(steps: np.ndarray, t: float, rise: bool) -> np.ndarray:
    """Unit exponential approach hitting 0 at step ``t`` (time constant t/4).

    After ``t`` the curve either stays at 0 or, with ``rise``, climbs with the
    slope it arrived with, so the minimum sits at the evaluation nearest ``t``.
    """
    if t <= 0:
        return np.zeros_like(steps, dtype=np.float64)
    tau = t / 4.0
    tail = math.exp(-t / tau)
    norm = 1.0 - tail
    s = steps.astype(np.float64)
    before = (np.exp(-np.minimum(s, t) / tau) - tail) / norm
    after = (s - t) / tau * tail / norm if rise else 0.0
    return np.where(s <= t, before, after)


@dataclass(frozen=True, eq=False)
class SimRunOutput:
    run: TelemetryRun
    true_final_perplexity: float
    true_t_ve: float
    true_t_llm: float
    realized_t_ve: float
    realized_t_llm: float

    @property
    def steps_run(self) -> int:
        return self.run.last_step

    def same_as(self, other: "SimRunOutput") -> bool:
        return self.run.same_as(other.run) and (
            self.true_final_perplexity,
            self.true_t_ve,
            self.true_t_llm,
            self.realized_t_ve,
            self.realized_t_llm,
        ) == (
            other.true_final_perplexity,
            other.true_t_ve,
            other.true_t_llm,
            other.realized_t_ve,
            other.realized_t_llm,
        )


def simulate_run(
    cfg: SimConfig,
    ranks: RankPair,
    d_f: int,
    run_seed: int | None = None,
    run_id: str | None = None,
    min_horizon: int = 0,
) -> SimRunOutput:
    """Simulate one early-stopped fine-tuning run.

    Evaluations happen every ``eval_interval`` steps from step 0 until
    ``patience + 1`` evaluations past the later of the two module convergence
    steps (or ``min_horizon`` if that is later).
    """
    if d_f < 1:
        raise SimulationConfigError("d_f must be positive")
    if run_seed is None:
        run_seed = derive_run_seed(ranks, d_f)
    true_t_ve, true_t_llm = true_times(cfg, ranks, d_f)
    l_true = true_perplexity(cfg, ranks, d_f)

    conv_noise = _stream(cfg, run_seed, _STREAM_CONV).standard_normal(2)
    t_ve = true_t_ve * math.exp(cfg.conv_noise_sigma_log * conv_noise[0])
    t_llm = true_t_llm * math.exp(cfg.conv_noise_sigma_log * conv_noise[1])
    t_run = max(t_ve, t_llm)

    e = cfg.eval_interval
    if not math.isfinite(t_run) or t_run >= MAX_STEPS:
        raise SimulationConfigError(f"convergence step {t_run:.3g} exceeds the 2^31-step horizon for {ranks}")
    horizon = max(math.ceil(t_run / e) * e + (cfg.patience + 1) * e, int(min_horizon))
    horizon = math.ceil(horizon / e) * e
    if horizon >= MAX_STEPS:
        raise SimulationConfigError(f"horizon {horizon} exceeds 2^31 steps")
    steps = np.arange(0, horizon + 1, e, dtype=np.int64)

    noise = _stream(cfg, run_seed, _STREAM_PPL).standard_normal(steps.size)
    l0 = l_true * cfg.init_ppl_factor
    ppl = (l_true + (l0 - l_true) * _decay(steps, t_run, rise=False)) * np.exp(cfg.noise_sigma_log * noise)
    floor = cfg.progress_floor
    ve = floor + _decay(steps, t_ve, rise=True)
    llm = floor + _decay(steps, t_llm, rise=True)

    run = TelemetryRun(
        run_id=run_id or f"r{ranks.r_ve}-{ranks.r_llm}-d{d_f}",
        ranks=ranks,
        dataset_size=int(d_f),
        batch_size=cfg.batch_size,
        eval_interval=e,
        steps=steps,
        val_perplexity=ppl,
        ve_progress=ve,
        llm_progress=llm,
    )
    return SimRunOutput(run, l_true, true_t_ve, true_t_llm, t_ve, t_llm)


class Simulator:
    """Handle bundling a config with run caching, used by the naive search."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self._cache: dict[tuple[RankPair, int], SimRunOutput] = {}

    def run(self, ranks: RankPair, d_f: int) -> SimRunOutput:
        key = (ranks, int(d_f))
        if key not in self._cache:
            self._cache[key] = simulate_run(self.cfg, ranks, int(d_f))
        return self._cache[key]

    def true_perplexity(self, ranks: RankPair, d_f: float) -> float:
        return true_perplexity(self.cfg, ranks, d_f)

    def oracle_grid(self, grid: Sequence[RankPair], d_f: float):
        return oracle_grid(self.cfg, grid, d_f)


# --------------------------------------------------------------------------
# calibration plan


DEFAULT_CALIBRATION_SIZES = (2**9, 2**10)


def calibration_pairs(rank_values: Sequence[int]) -> list[tuple[str, RankPair]]:
    """Diagonal pairs plus the anti-diagonal, which separates the two rank exponents."""
    values = sorted(int(r) for r in rank_values)
    diag = [("diag", RankPair(r, r)) for r in values]
    anti = [("anti", RankPair(r, s)) for r, s in zip(values, reversed(values))]
    return diag + anti


def simulate_calibration_plan(
    cfg: SimConfig,
    rank_values: Sequence[int],
    checkpoints: Sequence[int] = (),
    dataset_sizes: Sequence[int] = DEFAULT_CALIBRATION_SIZES,
) -> list[SimRunOutput]:
    """One run per representative pair.

    Diagonal runs use ``dataset_sizes[0]`` and anti-diagonal runs
    ``dataset_sizes[-1]``, so each module sees every rank at two dataset
    sizes.  Runs are extended to the last checkpoint when it lies beyond their
    early-stopping point.
    """
    if not rank_values:
        return []
    if not dataset_sizes:
        raise SimulationConfigError("dataset_sizes must not be empty")
    min_horizon = max(checkpoints, default=0)
    out = []
    for kind, ranks in calibration_pairs(rank_values):
        d_f = int(dataset_sizes[0] if kind == "diag" else dataset_sizes[-1])
        run_id = f"{kind}-{ranks.r_ve}-{ranks.r_llm}-d{d_f}"
        out.append(simulate_run(cfg, ranks, d_f, run_id=run_id, min_horizon=min_horizon))
    return out


def generate_calibration_plan(
    cfg: SimConfig,
    rank_values: Sequence[int],
    checkpoints: Sequence[int] = (),
    dataset_sizes: Sequence[int] = DEFAULT_CALIBRATION_SIZES,
) -> list[TelemetryRun]:
    return [o.run for o in simulate_calibration_plan(cfg, rank_values, checkpoints, dataset_sizes)]


# --------------------------------------------------------------------------
# gap / perplexity correlation


@dataclass(frozen=True)
class GapPoint:
    d_f: int
    ranks: RankPair
    gap_steps: float
    final_perplexity: float


def gap_perplexity_points(cfg: SimConfig, grid: Sequence[RankPair], d_tiers: Sequence[int]) -> list[GapPoint]:
    """Per simulated run: observed convergence gap and observed final perplexity.

    Convergence steps come from the patience detector on each module's
    progress series; the perplexity is the last (noisy) evaluation.
    """
    points = []
    for d_f in d_tiers:
        for ranks in grid:
            run = simulate_run(cfg, ranks, int(d_f)).run
            t = [
                detect_convergence(np.column_stack([run.steps, run.progress(m)]), cfg.patience).t_steps
                for m in ("ve", "llm")
            ]
            points.append(GapPoint(int(d_f), ranks, float(abs(t[0] - t[1])), float(run.val_perplexity[-1])))
    return points


def pearson_by_tier(points: Sequence[GapPoint]) -> dict[int, float]:
    tiers: dict[int, list[GapPoint]] = {}
    for p in points:
        tiers.setdefault(p.d_f, []).append(p)
    out = {}
    for d_f, pts in sorted(tiers.items()):
        gaps = np.array([p.gap_steps for p in pts])
        ppl = np.array([p.final_perplexity for p in pts])
        if len(pts) < 2 or gaps.std() == 0 or ppl.std() == 0:
            out[d_f] = float("nan")
        else:
            out[d_f] = float(np.corrcoef(gaps, ppl)[0, 1])
    return out
