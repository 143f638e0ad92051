"""Convergence-balanced LoRA rank search for multimodal fine-tuning."""

from .laws import CoefficientSet, FitConfig, LawCCoefficients, LawPCoefficients, fit_law_c, fit_law_p
from .search import SearchConfig, SearchResult, mars_search, naive_search
from .simulator import SimConfig, Simulator, generate_calibration_plan, scenario_s1, simulate_calibration_plan
from .telemetry import RankPair, build_calibration_dataset, detect_convergence, parse_telemetry

__version__ = "0.1.0"

__all__ = [
    "CoefficientSet",
    "FitConfig",
    "LawCCoefficients",
    "LawPCoefficients",
    "RankPair",
    "SearchConfig",
    "SearchResult",
    "SimConfig",
    "Simulator",
    "build_calibration_dataset",
    "detect_convergence",
    "fit_law_c",
    "fit_law_p",
    "generate_calibration_plan",
    "mars_search",
    "naive_search",
    "parse_telemetry",
    "scenario_s1",
    "simulate_calibration_plan",
]
