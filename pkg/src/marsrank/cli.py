"""Command-line pipeline: simulate -> fit -> search -> oracle -> report.

Exit codes: 0 success, 2 identifiability or grid mismatch, 3 fit failure,
4 I/O error, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GridMismatchError, MarsError, UsageError
from .files import atomic_write_text
from .laws import CoefficientSet, FitConfig, coefficient_set_from_reports
from .search import SearchConfig, SearchResult, cost_report, fit_all, search_with_coefficients
from .simulator import (
    DEFAULT_CALIBRATION_SIZES,
    S1_D_TIERS,
    S1_GRID_VALUES,
    SimConfig,
    Simulator,
    gap_perplexity_points,
    oracle_grid,
    pearson_by_tier,
    rank_grid,
    scenario_s1,
    simulate_calibration_plan,
)
from .telemetry import RankPair, build_calibration_dataset, format_telemetry, parse_telemetry

EXIT_OK = 0
EXIT_IO = 4
EXIT_USAGE = 64

ORACLE_FIELDS = ("r_ve", "r_llm", "true_perplexity", "t_ve", "t_llm")
TRUTH_FILE = "ground_truth.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=_seed, default=42, help="random seed (default 42)")
    p.add_argument("--out", help="output path (file or directory depending on the command)")
    p.add_argument("--format", choices=("json", "csv"), default=None, help="machine output format")
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags take precedence")
    return p


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sim-config", help="simulator config JSON (e.g. a ground_truth.json sidecar); default scenario S1")
    p.add_argument("--noise-sigma", type=float, help="log-normal perplexity noise")
    p.add_argument("--conv-noise-sigma", type=float, help="log-normal convergence-step noise")
    p.add_argument("--gap-lambda", type=float, help="convergence-gap penalty weight")
    p.add_argument("--gap-power", type=float, help="convergence-gap penalty exponent")


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="marsrank", description="Convergence-balanced LoRA rank search.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write calibration telemetry and a ground-truth sidecar")
    _sim_flags(p)
    p.add_argument("--ranks", type=_int_list, default=S1_GRID_VALUES, help="rank values (default 8,16,32,64)")
    p.add_argument("--dataset-sizes", type=_int_list, default=DEFAULT_CALIBRATION_SIZES)
    p.add_argument("--checkpoints", type=_int_list, default=(), help="extend every run to at least these steps")
    p.add_argument("--runs", type=int, help="keep only the first N runs of the plan")

    p = sub.add_parser("fit", parents=[common], help="fit both laws from telemetry")
    p.add_argument("telemetry")
    p.add_argument("--checkpoints", type=_int_list, help="truncation steps (default: the last logged step)")
    p.add_argument("--patience", type=_positive_int, default=5)
    p.add_argument("--min-delta", type=float, default=0.0)
    p.add_argument("--huber-delta", type=float, default=1e-3)
    p.add_argument("--grid-size", type=_positive_int, default=3)
    p.add_argument("--max-iter", type=_positive_int, default=500)
    p.add_argument("--holdout-stride", type=int, default=5)

    p = sub.add_parser("search", parents=[common], help="balanced rank search from fitted coefficients")
    p.add_argument("coefficients")
    p.add_argument("--d-target", type=_positive_int, default=8192)
    p.add_argument("--r-options", type=_int_list, default=S1_GRID_VALUES)
    p.add_argument("--r-min", type=_positive_int, default=1)
    p.add_argument("--r-max", type=_positive_int, default=256)

    p = sub.add_parser("oracle", parents=[common], help="noiseless brute-force grid table")
    _sim_flags(p)
    p.add_argument("--grid", type=_int_list, default=S1_GRID_VALUES, help="rank values of the square grid")
    p.add_argument("--d-target", type=_positive_int, default=8192)

    p = sub.add_parser("report", parents=[common], help="regret, cost and gap/perplexity series")
    p.add_argument("search_result")
    p.add_argument("oracle_table")
    p.add_argument("--truth", required=False, help="ground_truth.json written by simulate")
    p.add_argument("--shared-backbone", action="store_true")
    p.add_argument("--parallel-heads", type=_positive_int, default=4)
    p.add_argument("--d-tiers", type=_int_list, default=S1_D_TIERS)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse twice: once to find --config, then with its contents as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise _IOFailure(f"cannot read config {args.config}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    sub = _subparser(parser, args.command)
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for command {args.command}")
        if isinstance(value, list):
            value = tuple(value)
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


class _IOFailure(MarsError):
    exit_code = EXIT_IO


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _IOFailure(f"cannot read {path}: {exc.strerror or exc}") from None


def _write_text(path: str | Path, text: str) -> None:
    try:
        atomic_write_text(path, text)
    except OSError as exc:
        raise _IOFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def _load_json(path: str, what: str):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def _sim_config(args) -> SimConfig:
    if args.sim_config:
        data = _load_json(args.sim_config, "simulator config")
        data = data.get("sim_config", data)
        try:
            cfg = SimConfig.from_dict(data)
        except (KeyError, TypeError) as exc:
            raise UsageError(f"malformed simulator config: {exc}") from None
    else:
        cfg = scenario_s1()
    return cfg.with_overrides(
        seed=args.seed,
        noise_sigma_log=args.noise_sigma,
        conv_noise_sigma_log=args.conv_noise_sigma,
        gap_penalty_lambda=args.gap_lambda,
        gap_penalty_power=args.gap_power,
    )


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    if args.runs is not None and args.runs < 0:
        raise UsageError("--runs must be non-negative")
    outputs = simulate_calibration_plan(cfg, args.ranks, args.checkpoints, args.dataset_sizes)
    if args.runs is not None:
        outputs = outputs[: args.runs]
    fmt = "csv" if args.format == "csv" else "jsonl"
    out_dir = Path(args.out or ".")
    if out_dir.exists() and not out_dir.is_dir():
        raise _IOFailure(f"cannot write to {out_dir}: not a directory")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _IOFailure(f"cannot create {out_dir}: {exc.strerror or exc}") from None
    telemetry_path = out_dir / f"telemetry.{fmt}"
    _write_text(telemetry_path, format_telemetry([o.run for o in outputs], fmt))
    truth = {
        "sim_config": cfg.to_dict(),
        "runs": [
            {
                "run_id": o.run.run_id,
                "r_ve": o.run.ranks.r_ve,
                "r_llm": o.run.ranks.r_llm,
                "dataset_size": o.run.dataset_size,
                "steps_run": o.steps_run,
                "true_final_perplexity": o.true_final_perplexity,
                "true_t_ve": o.true_t_ve,
                "true_t_llm": o.true_t_llm,
                "realized_t_ve": o.realized_t_ve,
                "realized_t_llm": o.realized_t_llm,
            }
            for o in outputs
        ],
    }
    _write_text(out_dir / TRUTH_FILE, _dump(truth))
    print(f"wrote {len(outputs)} runs (seed {cfg.seed}) to {telemetry_path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        runs = parse_telemetry(args.telemetry)
    except OSError as exc:
        raise _IOFailure(f"cannot read {args.telemetry}: {exc.strerror or exc}") from None
    if not runs:
        raise UsageError(f"{args.telemetry} holds no telemetry")
    checkpoints = args.checkpoints or (max(r.last_step for r in runs),)
    dataset = build_calibration_dataset(runs, checkpoints, patience=args.patience, min_delta=args.min_delta)
    fit_config = FitConfig(
        huber_delta=args.huber_delta,
        grid_size=args.grid_size,
        max_iter=args.max_iter,
        holdout_stride=args.holdout_stride,
    )
    reports = fit_all(dataset, fit_config)
    coefs = coefficient_set_from_reports(reports, fit_config)
    out = args.out or "coefficients.json"
    _write_text(out, coefs.to_json() + "\n")
    for name, rep in reports.items():
        s = rep.summary()
        print(
            f"{name}: objective={s['objective_value']:.6g} holdout_mae_log={s['holdout_mae_log']:.6g} "
            f"starts={s['converged_starts']}/{s['starts_tried']} n_train={s['n_train']}"
        )
        print("  " + " ".join(f"{k}={v:.6g}" for k, v in s["coefficients"].items() if k != "module"))
    print(f"wrote coefficients to {out}")
    return EXIT_OK


def cmd_search(args) -> int:
    try:
        coefs = CoefficientSet.from_json(_read_text(args.coefficients))
    except json.JSONDecodeError as exc:
        raise UsageError(f"coefficients {args.coefficients} are not valid JSON: {exc}") from None
    config = SearchConfig(r_options=args.r_options, d_target=args.d_target, r_min=args.r_min, r_max=args.r_max)
    result = search_with_coefficients(coefs, config)
    out = args.out or "search_result.json"
    _write_text(out, result.to_json() + "\n")
    print(f"{'r_llm':>6} {'r_ve*':>10} {'r_ve':>5} {'t_ve':>12} {'t_llm':>12} {'L_hat':>10} fallback")
    for c in result.candidates:
        r_star = "-" if c.r_ve_continuous is None else f"{c.r_ve_continuous:.4g}"
        print(
            f"{c.ranks.r_llm:>6} {r_star:>10} {c.ranks.r_ve:>5} {c.predicted_t_ve:>12.6g} "
            f"{c.predicted_t_llm:>12.6g} {c.predicted_loss:>10.6g} {'yes' if c.fallback_used else 'no'}"
        )
    print(f"chosen (r_ve, r_llm) = {result.chosen}")
    return EXIT_OK


def format_oracle(rows) -> tuple[str, str]:
    records = [
        {"r_ve": r.ranks.r_ve, "r_llm": r.ranks.r_llm, "true_perplexity": r.true_perplexity, "t_ve": r.t_ve, "t_llm": r.t_llm}
        for r in rows
    ]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ORACLE_FIELDS, lineterminator="\n")
    w.writeheader()
    for rec in records:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
    return buf.getvalue(), _dump(records)


def parse_oracle(text: str, path: str = "<oracle>") -> list[dict]:
    """Read an oracle table written as CSV or as a JSON list."""
    stripped = text.lstrip()
    try:
        if stripped.startswith("["):
            raw = json.loads(text)
        else:
            reader = csv.DictReader(io.StringIO(text))
            if reader.fieldnames is None or set(ORACLE_FIELDS) - set(reader.fieldnames):
                raise UsageError(f"{path}: oracle table needs columns {', '.join(ORACLE_FIELDS)}")
            raw = list(reader)
        rows = [
            {
                "ranks": RankPair(int(r["r_ve"]), int(r["r_llm"])),
                "true_perplexity": float(r["true_perplexity"]),
                "t_ve": float(r["t_ve"]),
                "t_llm": float(r["t_llm"]),
            }
            for r in raw
        ]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"{path}: malformed oracle table: {exc}") from None
    if not rows:
        raise UsageError(f"{path}: empty oracle table")
    return rows


def cmd_oracle(args) -> int:
    cfg = _sim_config(args)
    best, table = oracle_grid(cfg, rank_grid(args.grid), args.d_target)
    csv_text, json_text = format_oracle(table)
    fmt = args.format or "csv"
    out = args.out or f"oracle.{fmt}"
    _write_text(out, csv_text if fmt == "csv" else json_text)
    print(f"oracle best (r_ve, r_llm) = {best} over {len(table)} pairs at d_f={args.d_target}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        result = SearchResult.from_dict(_load_json(args.search_result, "search result"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MarsError):
            raise
        raise UsageError(f"malformed search result {args.search_result}: {exc}") from None
    rows = parse_oracle(_read_text(args.oracle_table), args.oracle_table)
    d_target = result.config.d_target

    grid_llm = sorted({r["ranks"].r_llm for r in rows})
    grid_ve = sorted({r["ranks"].r_ve for r in rows})
    if grid_llm != sorted(result.config.r_options) or len(rows) != len(grid_llm) * len(grid_ve):
        raise GridMismatchError(
            f"oracle grid (r_llm {grid_llm}) does not match the searched options {list(result.config.r_options)}"
        )

    if args.truth:
        truth = _load_json(args.truth, "ground truth")
        try:
            cfg = SimConfig.from_dict(truth["sim_config"])
            plan_steps = [int(r["steps_run"]) for r in truth["runs"]]
        except (KeyError, TypeError) as exc:
            raise UsageError(f"malformed ground truth {args.truth}: {exc}") from None
    else:
        cfg = scenario_s1(seed=args.seed)
        plan_steps = [o.steps_run for o in simulate_calibration_plan(cfg, result.config.r_options)]

    # the oracle table must describe this simulator at the searched dataset size
    for r in rows:
        expected = Simulator(cfg).true_perplexity(r["ranks"], d_target)
        if not math.isclose(expected, r["true_perplexity"], rel_tol=1e-9):
            raise GridMismatchError(
                f"oracle row {r['ranks']} does not match the simulator at d_target={d_target}"
            )

    best = min(rows, key=lambda r: (r["true_perplexity"], r["ranks"].r_llm, r["ranks"].r_ve))
    sim = Simulator(cfg)
    chosen_true = sim.true_perplexity(result.chosen, d_target)
    regret = chosen_true / best["true_perplexity"] - 1.0

    grid = [r["ranks"] for r in rows]
    naive_steps = float(sum(sim.run(g, d_target).steps_run for g in grid))
    cost = cost_report(
        naive_steps,
        plan_steps,
        sim.run(result.chosen, d_target).steps_run,
        shared_backbone=args.shared_backbone,
        parallel_heads=args.parallel_heads,
        naive_runs=len(grid),
    )

    points = gap_perplexity_points(cfg, grid, args.d_tiers)
    pearson = pearson_by_tier(points)

    out_dir = Path(args.out or "report")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _IOFailure(f"cannot create {out_dir}: {exc.strerror or exc}") from None
    report = {
        "d_target": d_target,
        "chosen": {"r_ve": result.chosen.r_ve, "r_llm": result.chosen.r_llm},
        "chosen_true_perplexity": chosen_true,
        "oracle_best": {"r_ve": best["ranks"].r_ve, "r_llm": best["ranks"].r_llm},
        "oracle_best_true_perplexity": best["true_perplexity"],
        "regret": regret,
        "cost": cost.to_dict(),
        "gap_perplexity_pearson": {str(k): (None if np.isnan(v) else v) for k, v in pearson.items()},
    }
    _write_text(out_dir / "report.json", _dump(report))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["d_f", "r_ve", "r_llm", "gap_steps", "final_perplexity"])
    for p in points:
        w.writerow([p.d_f, p.ranks.r_ve, p.ranks.r_llm, repr(p.gap_steps), repr(p.final_perplexity)])
    _write_text(out_dir / "gap_scatter.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["d_f", "pearson"])
    for d_f, r in pearson.items():
        w.writerow([d_f, repr(r)])
    _write_text(out_dir / "gap_pearson.csv", buf.getvalue())

    print(f"regret {regret:+.4%} (chosen {result.chosen}, oracle best {best['ranks']})")
    print(f"speedup {cost.speedup:.2f}x (shared backbone {'on' if cost.shared_backbone_mode else 'off'})")
    print("pearson by d_f: " + ", ".join(f"{k}={v:.3f}" for k, v in pearson.items()))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "search": cmd_search,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except MarsError as exc:
        print(f"marsrank: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"marsrank: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
