"""Training-run telemetry: parsing, convergence detection and calibration data.

A telemetry file holds one record per evaluation event.  Records sharing a
``run_id`` are assembled into a :class:`TelemetryRun`.  Runs are turned into a
:class:`CalibrationDataset` by reading them at a list of checkpoint steps; a
checkpoint at step ``s`` stands in for a run on ``min(s * batch_size,
dataset_size)`` samples.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TelemetryParseError, TelemetryValidationError, UsageError

log = logging.getLogger(__name__)

DEFAULT_R_MAX = 256
MODULES = ("ve", "llm")

TELEMETRY_FIELDS = (
    "run_id",
    "r_ve",
    "r_llm",
    "dataset_size",
    "batch_size",
    "step",
    "val_perplexity",
    "ve_progress",
    "llm_progress",
)
_INT_FIELDS = ("r_ve", "r_llm", "dataset_size", "batch_size", "step")
_FLOAT_FIELDS = ("val_perplexity", "ve_progress", "llm_progress")


@dataclass(frozen=True, order=True)
class RankPair:
    """LoRA ranks of the vision encoder (projector included) and the LLM."""

    r_ve: int
    r_llm: int

    def __post_init__(self):
        for name in ("r_ve", "r_llm"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
            object.__setattr__(self, name, int(value))

    def check(self, r_max: int = DEFAULT_R_MAX) -> "RankPair":
        if self.r_ve > r_max or self.r_llm > r_max:
            raise ValueError(f"{self} exceeds r_max={r_max}")
        return self

    def rank(self, module: str) -> int:
        if module == "ve":
            return self.r_ve
        if module == "llm":
            return self.r_llm
        raise ValueError(f"unknown module {module!r}")

    def __str__(self) -> str:
        return f"({self.r_ve}, {self.r_llm})"


@dataclass(frozen=True, eq=False)
class TelemetryRun:
    """One fine-tuning run.  All series share the ``steps`` axis."""

    run_id: str
    ranks: RankPair
    dataset_size: int
    batch_size: int
    eval_interval: int
    steps: np.ndarray
    val_perplexity: np.ndarray
    ve_progress: np.ndarray
    llm_progress: np.ndarray

    def __post_init__(self):
        if self.dataset_size < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise TelemetryValidationError(
                f"run {self.run_id!r}: dataset_size, batch_size and eval_interval must be positive"
            )
        steps = np.asarray(self.steps, dtype=np.int64)
        if steps.ndim != 1 or steps.size == 0:
            raise TelemetryValidationError(f"run {self.run_id!r}: empty curve")
        if steps[0] < 0 or np.any(np.diff(steps) <= 0):
            raise TelemetryValidationError(f"run {self.run_id!r}: steps must be non-negative and strictly increasing")
        object.__setattr__(self, "steps", steps)
        for name in ("val_perplexity", "ve_progress", "llm_progress"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != steps.shape:
                raise TelemetryValidationError(f"run {self.run_id!r}: {name} length mismatch")
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise TelemetryValidationError(f"run {self.run_id!r}: {name} must be finite and > 0")
            object.__setattr__(self, name, arr)

    @property
    def curve(self) -> list[tuple[int, float]]:
        return list(zip(self.steps.tolist(), self.val_perplexity.tolist()))

    def progress(self, module: str) -> np.ndarray:
        if module == "ve":
            return self.ve_progress
        if module == "llm":
            return self.llm_progress
        raise ValueError(f"unknown module {module!r}")

    @property
    def module_progress(self) -> dict[str, list[tuple[int, float]]]:
        return {m: list(zip(self.steps.tolist(), self.progress(m).tolist())) for m in MODULES}

    @property
    def last_step(self) -> int:
        return int(self.steps[-1])

    def same_as(self, other: "TelemetryRun") -> bool:
        return (
            self.run_id == other.run_id
            and self.ranks == other.ranks
            and self.dataset_size == other.dataset_size
            and self.batch_size == other.batch_size
            and self.eval_interval == other.eval_interval
            and np.array_equal(self.steps, other.steps)
            and np.array_equal(self.val_perplexity, other.val_perplexity)
            and np.array_equal(self.ve_progress, other.ve_progress)
            and np.array_equal(self.llm_progress, other.llm_progress)
        )


# --------------------------------------------------------------------------
# parsing


def _coerce_record(raw: dict, line: int) -> dict:
    missing = [f for f in TELEMETRY_FIELDS if f not in raw or raw[f] in (None, "")]
    if missing:
        raise TelemetryParseError(f"missing field(s) {', '.join(missing)}", line)
    rec = {"run_id": str(raw["run_id"])}
    for name in _INT_FIELDS:
        value = raw[name]
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise TelemetryParseError(f"{name} is not a number: {value!r}", line) from None
        if not as_float.is_integer():
            raise TelemetryParseError(f"{name} must be an integer: {value!r}", line)
        rec[name] = int(as_float)
    for name in _FLOAT_FIELDS:
        try:
            rec[name] = float(raw[name])
        except (TypeError, ValueError):
            raise TelemetryParseError(f"{name} is not a number: {raw[name]!r}", line) from None
        if not math.isfinite(rec[name]) or rec[name] <= 0:
            raise TelemetryValidationError(f"{name} must be finite and > 0, got {raw[name]!r}", line)
    if "eval_interval" in raw and raw["eval_interval"] not in (None, ""):
        rec["eval_interval"] = int(float(raw["eval_interval"]))
    if rec["step"] < 0:
        raise TelemetryValidationError("step must be non-negative", line)
    for name in ("r_ve", "r_llm", "dataset_size", "batch_size"):
        if rec[name] < 1:
            raise TelemetryValidationError(f"{name} must be positive", line)
    if rec["r_ve"] > DEFAULT_R_MAX or rec["r_llm"] > DEFAULT_R_MAX:
        raise TelemetryValidationError(f"rank exceeds r_max={DEFAULT_R_MAX}", line)
    return rec


def _iter_jsonl(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TelemetryParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise TelemetryParseError("record is not a JSON object", lineno)
        yield lineno, obj


def _iter_csv(text: str):
    if not text.strip():
        return
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not set(TELEMETRY_FIELDS) <= set(reader.fieldnames):
        raise TelemetryParseError("CSV header must name all telemetry columns", 1)
    for row in reader:
        # header is line 1; DictReader.line_num is the physical line just read
        yield reader.line_num, row


def _assemble(records: Iterable[tuple[int, dict]]) -> list[TelemetryRun]:
    by_run: dict[str, list[tuple[int, dict]]] = {}
    for lineno, raw in records:
        rec = _coerce_record(raw, lineno)
        by_run.setdefault(rec["run_id"], []).append((lineno, rec))

    runs = []
    for run_id, items in by_run.items():
        first_line, first = items[0]
        seen: dict[int, int] = {}
        for lineno, rec in items:
            for name in ("r_ve", "r_llm", "dataset_size", "batch_size"):
                if rec[name] != first[name]:
                    raise TelemetryParseError(
                        f"run {run_id!r}: {name} changes from {first[name]} to {rec[name]}", lineno
                    )
            if rec["step"] in seen:
                raise TelemetryParseError(
                    f"run {run_id!r}: duplicate step {rec['step']} (first seen on line {seen[rec['step']]})", lineno
                )
            seen[rec["step"]] = lineno
        items.sort(key=lambda item: item[1]["step"])
        steps = np.array([rec["step"] for _, rec in items], dtype=np.int64)
        if "eval_interval" in first:
            interval = first["eval_interval"]
        elif steps.size > 1:
            interval = int(np.min(np.diff(steps)))
        else:
            interval = 1
        runs.append(
            TelemetryRun(
                run_id=run_id,
                ranks=RankPair(first["r_ve"], first["r_llm"]),
                dataset_size=first["dataset_size"],
                batch_size=first["batch_size"],
                eval_interval=interval,
                steps=steps,
                val_perplexity=np.array([rec["val_perplexity"] for _, rec in items]),
                ve_progress=np.array([rec["ve_progress"] for _, rec in items]),
                llm_progress=np.array([rec["llm_progress"] for _, rec in items]),
            )
        )
    return runs


def _resolve_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt not in ("jsonl", "csv"):
        raise UsageError(f"unknown telemetry format {fmt!r} (expected jsonl or csv)")
    return fmt


def parse_telemetry(path: str | Path, format: str | None = None) -> list[TelemetryRun]:
    """Read a JSONL or CSV telemetry file into runs, in order of first appearance.

    ``format`` defaults to the file suffix.
    """
    path = Path(path)
    fmt = _resolve_format(path, format)
    text = path.read_text(encoding="utf-8")
    records = _iter_jsonl(text) if fmt == "jsonl" else _iter_csv(text)
    return _assemble(records)


def telemetry_records(runs: Sequence[TelemetryRun]) -> list[dict]:
    rows = []
    for run in runs:
        for i, step in enumerate(run.steps.tolist()):
            rows.append(
                {
                    "run_id": run.run_id,
                    "r_ve": run.ranks.r_ve,
                    "r_llm": run.ranks.r_llm,
                    "dataset_size": run.dataset_size,
                    "batch_size": run.batch_size,
                    "step": step,
                    "val_perplexity": float(run.val_perplexity[i]),
                    "ve_progress": float(run.ve_progress[i]),
                    "llm_progress": float(run.llm_progress[i]),
                }
            )
    return rows


def format_telemetry(runs: Sequence[TelemetryRun], format: str = "jsonl") -> str:
    """Serialize runs; floats use ``repr`` so values survive a round trip exactly."""
    rows = telemetry_records(runs)
    if format == "jsonl":
        return "".join(json.dumps(row) + "\n" for row in rows)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TELEMETRY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()
    raise UsageError(f"unknown telemetry format {format!r}")


# --------------------------------------------------------------------------
# convergence


@dataclass(frozen=True)
class ConvergenceVerdict:
    converged: bool
    t_steps: int
    best_value: float
    # step at which the patience budget ran out; None when not converged
    stop_step: int | None = None


def _detect(steps: np.ndarray, values: np.ndarray, patience: float, min_delta: float) -> tuple[bool, int, int | None]:
    """Early-stopping scan.  Returns (converged, best index, stop index)."""
    best = values[0]
    best_idx = 0
    wait = 0
    for i in range(1, len(values)):
        v = values[i]
        if v < best - min_delta:
            best = v
            best_idx = i
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                return True, best_idx, i
    return False, int(np.argmin(values)), None


def detect_convergence(series, patience: float = 5, min_delta: float = 0.0) -> ConvergenceVerdict:
    """Patience-based early stopping over an evaluation series.

    ``series`` is an ordered sequence of ``(step, value)`` pairs, lower values
    being better.  The run is converged at the first best value that the next
    ``patience`` evaluations fail to improve on by more than ``min_delta``.
    Ties go to the earliest step.  When the series ends first, the verdict is
    not converged and points at the global minimum.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("detect_convergence needs a non-empty series")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("series must be a sequence of (step, value) pairs")
    if not patience > 0:
        raise ValueError("patience must be positive")
    if min_delta < 0:
        raise ValueError("min_delta must be non-negative")
    steps = arr[:, 0].astype(np.int64)
    if np.any(np.diff(steps) <= 0):
        raise ValueError("steps must be strictly increasing")
    values = arr[:, 1]
    converged, idx, stop = _detect(steps, values, patience, min_delta)
    return ConvergenceVerdict(
        converged=converged,
        t_steps=int(steps[idx]),
        best_value=float(values[idx]),
        stop_step=None if stop is None else int(steps[stop]),
    )


# --------------------------------------------------------------------------
# calibration dataset


@dataclass(frozen=True)
class PerfObs:
    ranks: RankPair
    d_eff: int
    perplexity: float


@dataclass(frozen=True)
class ConvObs:
    rank: int
    d_eff: int
    t_steps: int


@dataclass(frozen=True)
class CalibrationDataset:
    perf_obs: tuple[PerfObs, ...] = ()
    conv_obs_ve: tuple[ConvObs, ...] = ()
    conv_obs_llm: tuple[ConvObs, ...] = ()
    provenance: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict, compare=False)

    def conv_obs(self, module: str) -> tuple[ConvObs, ...]:
        if module == "ve":
            return self.conv_obs_ve
        if module == "llm":
            return self.conv_obs_llm
        raise ValueError(f"unknown module {module!r}")

    def perf_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Features ``(r_ve, r_llm, d_eff)`` as an (n, 3) array, and perplexities."""
        X = np.array([(o.ranks.r_ve, o.ranks.r_llm, o.d_eff) for o in self.perf_obs], dtype=np.float64)
        y = np.array([o.perplexity for o in self.perf_obs], dtype=np.float64)
        return X.reshape(-1, 3), y

    def conv_arrays(self, module: str) -> tuple[np.ndarray, np.ndarray]:
        obs = self.conv_obs(module)
        X = np.array([(o.rank, o.d_eff) for o in obs], dtype=np.float64)
        y = np.array([o.t_steps for o in obs], dtype=np.float64)
        return X.reshape(-1, 2), y

    def to_dict(self) -> dict:
        return {
            "perf_obs": [
                {"r_ve": o.ranks.r_ve, "r_llm": o.ranks.r_llm, "d_eff": o.d_eff, "perplexity": o.perplexity}
                for o in self.perf_obs
            ],
            "conv_obs_ve": [{"rank": o.rank, "d_eff": o.d_eff, "t_steps": o.t_steps} for o in self.conv_obs_ve],
            "conv_obs_llm": [{"rank": o.rank, "d_eff": o.d_eff, "t_steps": o.t_steps} for o in self.conv_obs_llm],
            "provenance": list(self.provenance),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationDataset":
        def conv(rows):
            return tuple(ConvObs(int(r["rank"]), int(r["d_eff"]), int(r["t_steps"])) for r in rows)

        return cls(
            perf_obs=tuple(
                PerfObs(RankPair(int(r["r_ve"]), int(r["r_llm"])), int(r["d_eff"]), float(r["perplexity"]))
                for r in data["perf_obs"]
            ),
            conv_obs_ve=conv(data["conv_obs_ve"]),
            conv_obs_llm=conv(data["conv_obs_llm"]),
            provenance=tuple(data.get("provenance", ())),
            diagnostics=dict(data.get("diagnostics", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationDataset":
        return cls.from_dict(json.loads(text))


def build_calibration_dataset(
    runs: Sequence[TelemetryRun],
    checkpoint_steps: Sequence[int],
    patience: float = 5,
    min_delta: float = 0.0,
) -> CalibrationDataset:
    """Read every run at every checkpoint.

    Each checkpoint yields one performance observation (the last evaluation at
    or before the checkpoint) and, per module, a convergence observation when
    the progress series truncated at the checkpoint has converged.  Censored
    truncations and checkpoints that precede a run's first evaluation are
    dropped and counted in ``diagnostics``.
    """
    checkpoints = [int(s) for s in checkpoint_steps]
    if any(s < 1 for s in checkpoints):
        raise ValueError("checkpoint steps must be positive")
    if checkpoints != sorted(checkpoints):
        raise ValueError("checkpoint steps must be sorted ascending")

    perf: list[PerfObs] = []
    conv: dict[str, list[ConvObs]] = {m: [] for m in MODULES}
    censored = Counter()
    degenerate = Counter()
    skipped = 0

    for run in runs:
        full = {}
        for module in MODULES:
            values = run.progress(module)
            full[module] = _detect(run.steps, values, patience, min_delta)
        for s in checkpoints:
            idx = int(np.searchsorted(run.steps, s, side="right")) - 1
            if idx < 0:
                skipped += 1
                continue
            d_eff = min(s * run.batch_size, run.dataset_size)
            perf.append(PerfObs(run.ranks, d_eff, float(run.val_perplexity[idx])))
            for module in MODULES:
                converged, best_idx, stop_idx = full[module]
                # the scan is prefix-monotone: a prefix converges iff it contains the stop index
                if not converged or stop_idx > idx:
                    censored[module] += 1
                    continue
                t = int(run.steps[best_idx])
                if t <= 0:
                    degenerate[module] += 1
                    continue
                conv[module].append(ConvObs(run.ranks.rank(module), d_eff, t))

    if skipped:
        log.warning("%d checkpoint(s) precede the first evaluation of their run and were skipped", skipped)
    diagnostics = {
        "censored_ve": censored["ve"],
        "censored_llm": censored["llm"],
        "zero_step_ve": degenerate["ve"],
        "zero_step_llm": degenerate["llm"],
        "skipped_checkpoints": skipped,
    }
    return CalibrationDataset(
        perf_obs=tuple(perf),
        conv_obs_ve=tuple(conv["ve"]),
        conv_obs_llm=tuple(conv["llm"]),
        provenance=tuple(run.run_id for run in runs),
        diagnostics=diagnostics,
    )
