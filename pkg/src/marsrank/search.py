"""Convergence-balanced rank search.

For each candidate LLM rank the vision-encoder rank that equalizes the two
predicted convergence times is solved in closed form, rounded, and the
performance law picks the best of the resulting pairs.  The exhaustive grid
search it replaces and a step-count cost model live here too.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FitFailure, NumericRangeError, UsageError
from .laws import (
    CoefficientSet,
    FitConfig,
    FitReport,
    LawCCoefficients,
    LawPCoefficients,
    fit_law_c,
    fit_law_p,
    predict_convergence,
    predict_loss,
)
from .telemetry import DEFAULT_R_MAX, CalibrationDataset, RankPair

DEFAULT_R_OPTIONS = (8, 16, 32, 64)


@dataclass(frozen=True)
class SearchConfig:
    r_options: tuple[int, ...] = DEFAULT_R_OPTIONS
    d_target: int = 8192
    r_min: int = 1
    r_max: int = DEFAULT_R_MAX

    def __post_init__(self):
        opts = tuple(int(r) for r in self.r_options)
        object.__setattr__(self, "r_options", opts)
        if not opts:
            raise UsageError("r_options must not be empty")
        if any(b <= a for a, b in zip(opts, opts[1:])):
            raise UsageError("r_options must be strictly increasing")
        if not 1 <= self.r_min <= self.r_max:
            raise UsageError("need 1 <= r_min <= r_max")
        if opts[0] < self.r_min or opts[-1] > self.r_max:
            raise UsageError(f"r_options must lie within [{self.r_min}, {self.r_max}]")
        if not self.d_target > 0:
            raise UsageError("d_target must be positive")


@dataclass(frozen=True)
class Candidate:
    ranks: RankPair
    r_ve_continuous: float | None
    fallback_used: bool
    predicted_t_ve: float
    predicted_t_llm: float
    predicted_loss: float | None = None
    clamped: bool = False

    def to_dict(self) -> dict:
        return {
            "ranks": {"r_ve": self.ranks.r_ve, "r_llm": self.ranks.r_llm},
            "r_ve_continuous": self.r_ve_continuous,
            "fallback_used": self.fallback_used,
            "clamped": self.clamped,
            "predicted_t_ve": self.predicted_t_ve,
            "predicted_t_llm": self.predicted_t_llm,
            "predicted_loss": self.predicted_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(
            ranks=RankPair(int(d["ranks"]["r_ve"]), int(d["ranks"]["r_llm"])),
            r_ve_continuous=None if d["r_ve_continuous"] is None else float(d["r_ve_continuous"]),
            fallback_used=bool(d["fallback_used"]),
            predicted_t_ve=float(d["predicted_t_ve"]),
            predicted_t_llm=float(d["predicted_t_llm"]),
            predicted_loss=None if d.get("predicted_loss") is None else float(d["predicted_loss"]),
            clamped=bool(d.get("clamped", False)),
        )


@dataclass(frozen=True)
class SearchResult:
    candidates: tuple[Candidate, ...]
    chosen: RankPair
    chosen_predicted_loss: float
    fallback_rate: float
    config: SearchConfig = field(default_factory=SearchConfig)
    cost: dict = field(default_factory=dict, compare=False)

    @property
    def unique_pairs(self) -> list[RankPair]:
        seen: list[RankPair] = []
        for c in self.candidates:
            if c.ranks not in seen:
                seen.append(c.ranks)
        return seen

    def to_dict(self) -> dict:
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "chosen": {"r_ve": self.chosen.r_ve, "r_llm": self.chosen.r_llm},
            "chosen_predicted_loss": self.chosen_predicted_loss,
            "fallback_rate": self.fallback_rate,
            "config": {
                "r_options": list(self.config.r_options),
                "d_target": self.config.d_target,
                "r_min": self.config.r_min,
                "r_max": self.config.r_max,
            },
            "cost": self.cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchResult":
        cfg = d.get("config", {})
        return cls(
            candidates=tuple(Candidate.from_dict(c) for c in d["candidates"]),
            chosen=RankPair(int(d["chosen"]["r_ve"]), int(d["chosen"]["r_llm"])),
            chosen_predicted_loss=float(d["chosen_predicted_loss"]),
            fallback_rate=float(d["fallback_rate"]),
            config=SearchConfig(
                r_options=tuple(cfg.get("r_options", DEFAULT_R_OPTIONS)),
                d_target=int(cfg.get("d_target", 8192)),
                r_min=int(cfg.get("r_min", 1)),
                r_max=int(cfg.get("r_max", DEFAULT_R_MAX)),
            ),
            cost=dict(d.get("cost", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SearchResult":
        return cls.from_dict(json.loads(text))


FALLBACK = None


def balanced_ve_rank(
    c_ve: LawCCoefficients, c_llm: LawCCoefficients, r_llm: float, d_target: float
) -> float | None:
    """Continuous VE rank whose predicted convergence time matches the LLM's.

    Solves ``k_v r^g_v D^d_v + E_ve = k_l r_llm^g_l D^d_l + E_llm`` for ``r``.
    Returns ``None`` (the fallback) when the right-hand side minus ``E_ve`` is
    not positive, where no real solution exists.
    """
    if not r_llm >= 1 or not d_target > 0:
        raise ValueError("r_llm must be >= 1 and d_target positive")
    if (c_ve.k, c_ve.gamma, c_ve.delta, c_ve.E) == (c_llm.k, c_llm.gamma, c_llm.delta, c_llm.E):
        # identical laws balance at identical ranks; skip the exp/log round trip
        return float(r_llm)
    with np.errstate(over="ignore"):
        t_llm_power = float(np.exp(math.log(c_llm.k) + c_llm.gamma * math.log(r_llm) + c_llm.delta * math.log(d_target)))
    numerator = t_llm_power + (c_llm.E - c_ve.E)
    if not math.isfinite(numerator):
        raise NumericRangeError(f"balance numerator overflows at r_llm={r_llm}")
    if numerator <= 0:
        return FALLBACK
    log_r = (math.log(numerator) - math.log(c_ve.k) - c_ve.delta * math.log(d_target)) / c_ve.gamma
    with np.errstate(over="ignore"):
        r = float(np.exp(log_r))
    if not math.isfinite(r) or r <= 0:
        raise NumericRangeError(f"balanced VE rank out of range at r_llm={r_llm} (log r = {log_r:.3g})")
    return r


def round_rank(r: float, r_min: int, r_max: int) -> tuple[int, bool]:
    """Round half up, then clamp.  Returns (rank, clamped).

    ``clamped`` flags a continuous solution outside ``[r_min, r_max]``.
    """
    clamped = r < r_min or r > r_max
    if r >= r_max:
        return r_max, clamped
    return min(max(int(math.floor(r + 0.5)), r_min), r_max), clamped


def generate_candidates(c_ve: LawCCoefficients, c_llm: LawCCoefficients, config: SearchConfig) -> list[Candidate]:
    out = []
    for r_llm in config.r_options:
        try:
            r_star = balanced_ve_rank(c_ve, c_llm, r_llm, config.d_target)
            if r_star is FALLBACK:
                r_ve, clamped = r_llm, False
            else:
                r_ve, clamped = round_rank(r_star, config.r_min, config.r_max)
            t_ve = predict_convergence(c_ve, r_ve, config.d_target)
            t_llm = predict_convergence(c_llm, r_llm, config.d_target)
        except NumericRangeError as exc:
            raise NumericRangeError(f"r_llm={r_llm}: {exc}") from None
        out.append(
            Candidate(
                ranks=RankPair(r_ve, r_llm),
                r_ve_continuous=r_star,
                fallback_used=r_star is FALLBACK,
                predicted_t_ve=t_ve,
                predicted_t_llm=t_llm,
                clamped=clamped,
            )
        )
    return out


def _tie_key(c: Candidate):
    # lowest loss, then the cheaper configuration
    return (c.predicted_loss, c.ranks.r_llm, c.ranks.r_ve)


def select_best(
    candidates: Sequence[Candidate], c_p: LawPCoefficients, d_target: float, config: SearchConfig | None = None
) -> SearchResult:
    if not candidates:
        raise ValueError("select_best needs at least one candidate")
    scored = tuple(
        Candidate(
            ranks=c.ranks,
            r_ve_continuous=c.r_ve_continuous,
            fallback_used=c.fallback_used,
            predicted_t_ve=c.predicted_t_ve,
            predicted_t_llm=c.predicted_t_llm,
            predicted_loss=predict_loss(c_p, c.ranks, d_target),
            clamped=c.clamped,
        )
        for c in candidates
    )
    best = min(scored, key=_tie_key)
    if config is None:
        opts = tuple(sorted({c.ranks.r_llm for c in scored}))
        config = SearchConfig(r_options=opts, d_target=int(d_target), r_max=max(DEFAULT_R_MAX, *(c.ranks.r_ve for c in scored)))
    return SearchResult(
        candidates=scored,
        chosen=best.ranks,
        chosen_predicted_loss=best.predicted_loss,
        fallback_rate=sum(c.fallback_used for c in scored) / len(scored),
        config=config,
        cost={"mars_candidates": len(scored), "naive_runs": len(config.r_options) ** 2},
    )


def search_with_coefficients(coefs: CoefficientSet, config: SearchConfig) -> SearchResult:
    candidates = generate_candidates(coefs.law_c_ve, coefs.law_c_llm, config)
    return select_best(candidates, coefs.law_p, config.d_target, config)


def fit_all(dataset: CalibrationDataset, fit_config: FitConfig = FitConfig()) -> dict[str, FitReport]:
    """Fit both convergence laws and the performance law, labelling failures by stage."""
    reports = {}
    for module in ("ve", "llm"):
        reports[f"law_c_{module}"] = fit_law_c(dataset, module, fit_config, stage=f"law_c_{module}")
    reports["law_p"] = fit_law_p(dataset, fit_config, stage="law_p")
    return reports


def mars_search(
    dataset: CalibrationDataset, config: SearchConfig = SearchConfig(), fit_config: FitConfig = FitConfig()
) -> tuple[SearchResult, dict[str, FitReport]]:
    """Calibrate both laws on ``dataset`` and run the balanced search."""
    reports = fit_all(dataset, fit_config)
    try:
        candidates = generate_candidates(reports["law_c_ve"].coefficients, reports["law_c_llm"].coefficients, config)
        result = select_best(candidates, reports["law_p"].coefficients, config.d_target, config)
    except NumericRangeError as exc:
        raise FitFailure(f"fitted coefficients are numerically unusable: {exc}", stage="search") from None
    return result, reports


# --------------------------------------------------------------------------
# exhaustive baseline and cost accounting


@dataclass(frozen=True)
class CostReport:
    naive_runs: int
    naive_steps: float
    mars_calibration_steps: float
    mars_final_steps: float
    speedup: float
    shared_backbone_mode: bool
    parallel_heads: int = 1

    def to_dict(self) -> dict:
        return {
            "naive_runs": self.naive_runs,
            "naive_steps": self.naive_steps,
            "mars_calibration_steps": self.mars_calibration_steps,
            "mars_final_steps": self.mars_final_steps,
            "speedup": self.speedup,
            "shared_backbone_mode": self.shared_backbone_mode,
            "parallel_heads": self.parallel_heads,
        }


def naive_search(sim, grid: Sequence[RankPair], d_target: int) -> tuple[RankPair, dict]:
    """Fully simulate every pair and keep the one with the lowest true final perplexity.

    ``sim`` is a :class:`marsrank.simulator.Simulator`.  The cost is the sum of
    the simulated run lengths.
    """
    if not grid:
        raise ValueError("grid must not be empty")
    rows = []
    for ranks in grid:
        out = sim.run(ranks, d_target)
        rows.append((out.true_final_perplexity, ranks.r_llm, ranks.r_ve, ranks, out.steps_run))
    best = min(rows, key=lambda r: r[:3])
    return best[3], {"naive_runs": len(rows), "naive_steps": float(sum(r[4] for r in rows))}


def cost_report(
    naive_steps: float,
    calibration_plan: Sequence[float],
    final_run_steps: float,
    shared_backbone: bool = False,
    parallel_heads: int = 4,
    naive_runs: int = 1,
) -> CostReport:
    """Compare exhaustive search against calibration plus one final run.

    With ``shared_backbone`` one frozen-backbone pass serves ``parallel_heads``
    adapter configurations, so calibration cost is divided by that count.
    """
    steps = [float(s) for s in calibration_plan]
    if naive_steps <= 0 or final_run_steps <= 0 or any(s <= 0 for s in steps):
        raise ValueError("step counts must be positive")
    if shared_backbone and parallel_heads < 1:
        raise ValueError("parallel_heads must be >= 1")
    calibration = sum(steps)
    heads = parallel_heads if shared_backbone else 1
    calibration /= heads
    denominator = calibration + float(final_run_steps)
    if denominator <= 0:
        raise ValueError("zero MARS cost")
    return CostReport(
        naive_runs=naive_runs,
        naive_steps=float(naive_steps),
        mars_calibration_steps=calibration,
        mars_final_steps=float(final_run_steps),
        speedup=float(naive_steps) / denominator,
        shared_backbone_mode=bool(shared_backbone),
        parallel_heads=heads,
    )


__all__ = [
    "SearchConfig",
    "Candidate",
    "SearchResult",
    "CostReport",
    "balanced_ve_rank",
    "round_rank",
    "generate_candidates",
    "select_best",
    "search_with_coefficients",
    "fit_all",
    "mars_search",
    "naive_search",
    "cost_report",
]
