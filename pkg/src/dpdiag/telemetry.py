"""Newline-delimited JSON run logs, run summaries and cross-run comparison.

File layout: the first line is the manifest (``"type": "manifest"``), each
following line is one ``(step, rank)`` record, sorted by step then rank::

    {"type":"manifest","schema_version":1,"run_id":"...","world_size":8,...}
    {"schema_version":1,"run_id":"...","step":0,"rank":0,"loss":1.23,"grad_norm":0.9,"gradient":[...]}

A record carries a full ``gradient`` array, a ``sketch`` object
(``{"sketch_seed", "source_dim", "projected"}``) or neither. Floats use
Python's shortest round-trip repr, so writing the same log twice, or
re-writing a log that was read back, gives byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from dpdiag import metrics
from dpdiag.metrics import ConsistencyMetrics, GradientSketch, StepSnapshot, WorkerStepRecord
from dpdiag.runlog import EXTERNAL, LOG_SCHEMA_VERSION, RunLog, RunManifest

logger = logging.getLogger(__name__)

SUPPORTED_SCHEMA_VERSIONS = (LOG_SCHEMA_VERSION,)

# run-level means reported per metric, in report order
SUMMARY_METRICS = (
    "mean_loss",
    "loss_dispersion",
    "loss_range",
    "mean_grad_norm",
    "grad_norm_dispersion",
    "grad_norm_range",
    "direction_consistency",
)


class TelemetryError(Exception):
    pass


class LogIOError(TelemetryError):
    pass


class UnknownSchemaVersion(TelemetryError):
    pass


class MalformedLine(TelemetryError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


class DuplicateCell(MalformedLine):
    pass


class NoCompleteSteps(TelemetryError):
    pass


class EmptyInput(TelemetryError):
    pass


# -- writing ----------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False, ensure_ascii=False)


def record_line(run_id: str, step: int, rec: WorkerStepRecord) -> str:
    obj: dict[str, Any] = {
        "schema_version": LOG_SCHEMA_VERSION,
        "run_id": run_id,
        "step": step,
        "rank": rec.rank,
        "loss": float(rec.loss),
        "grad_norm": float(rec.grad_norm),
    }
    if rec.gradient is not None:
        obj["gradient"] = np.asarray(rec.gradient, dtype=np.float64).tolist()
    elif rec.sketch is not None:
        obj["sketch"] = {
            "sketch_seed": rec.sketch.sketch_seed,
            "source_dim": rec.sketch.source_dim,
            "projected": rec.sketch.projected.tolist(),
        }
    return _dumps(obj)


def dumps_log(run: RunLog) -> str:
    lines = [_dumps(run.manifest.to_dict())]
    for snap in sorted(run.snapshots, key=lambda s: s.step):
        for rec in sorted(snap.records, key=lambda r: r.rank):
            lines.append(record_line(run.run_id, snap.step, rec))
    return "\n".join(lines) + "\n"


def write_log(run: RunLog, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_log(run), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise LogIOError(f"cannot write log {path}: {exc.strerror or exc}") from exc


# -- reading ----------------------------------------------------------------


def _field(obj: dict, key: str, types, path, lineno, optional=False):
    if key not in obj:
        if optional:
            return None
        raise MalformedLine(path, lineno, f"missing field '{key}'")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise MalformedLine(path, lineno, f"field '{key}' has wrong type {type(value).__name__}")
    return value


def _float_array(values, key, path, lineno) -> np.ndarray:
    if not isinstance(values, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in values
    ):
        raise MalformedLine(path, lineno, f"field '{key}' must be an array of numbers")
    return np.array(values, dtype=np.float64)


def _check_version(obj, path, lineno):
    version = obj.get("schema_version")
    if version not in SUPPORTED_SCHEMA_VERSIONS:
        raise UnknownSchemaVersion(f"{path}:{lineno}: unsupported schema_version {version!r}")


def _parse_manifest(obj, path) -> RunManifest:
    if obj.get("type") != "manifest":
        raise MalformedLine(path, 1, "first line must be the manifest")
    _check_version(obj, path, 1)
    world_size = _field(obj, "world_size", int, path, 1)
    if world_size < 1:
        raise MalformedLine(path, 1, "world_size must be >= 1")
    config = obj.get("config", EXTERNAL)
    if not isinstance(config, (dict, str)):
        raise MalformedLine(path, 1, "config must be an object or the 'external' marker")
    return RunManifest(
        run_id=_field(obj, "run_id", str, path, 1),
        world_size=world_size,
        config=config,
        flattening=obj.get("flattening"),
        prng=obj.get("prng"),
        created=obj.get("created"),
        schema_version=obj["schema_version"],
    )


_RECORD_KEYS = {"schema_version", "run_id", "step", "rank", "loss", "grad_norm", "gradient", "sketch"}


def _parse_record(obj, manifest: RunManifest, path, lineno) -> tuple[int, WorkerStepRecord]:
    if not isinstance(obj, dict):
        raise MalformedLine(path, lineno, "record must be a JSON object")
    _check_version(obj, path, lineno)
    extra = set(obj) - _RECORD_KEYS
    if extra:
        raise MalformedLine(path, lineno, f"unknown fields {sorted(extra)}")
    if _field(obj, "run_id", str, path, lineno) != manifest.run_id:
        raise MalformedLine(path, lineno, "run_id does not match manifest")
    step = _field(obj, "step", int, path, lineno)
    rank = _field(obj, "rank", int, path, lineno)
    if step < 0 or not 0 <= rank < manifest.world_size:
        raise MalformedLine(path, lineno, f"step/rank out of range: ({step}, {rank})")
    loss = float(_field(obj, "loss", (int, float), path, lineno))
    norm = float(_field(obj, "grad_norm", (int, float), path, lineno))
    if norm < 0:
        raise MalformedLine(path, lineno, "grad_norm must be >= 0")
    if "gradient" in obj and "sketch" in obj:
        raise MalformedLine(path, lineno, "record has both gradient and sketch")
    gradient = sketch = None
    if "gradient" in obj:
        gradient = _float_array(obj["gradient"], "gradient", path, lineno)
    elif "sketch" in obj:
        raw = obj["sketch"]
        if not isinstance(raw, dict):
            raise MalformedLine(path, lineno, "sketch must be an object")
        sketch = GradientSketch(
            projected=_float_array(raw.get("projected"), "sketch.projected", path, lineno),
            sketch_seed=_field(raw, "sketch_seed", int, path, lineno),
            source_dim=_field(raw, "source_dim", int, path, lineno),
        )
    return step, WorkerStepRecord(rank, loss, norm, gradient=gradient, sketch=sketch)


def parse_log(text: str, path="<string>") -> RunLog:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise MalformedLine(path, 1, "empty log (manifest line missing)")
    try:
        first = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedLine(path, 1, f"invalid JSON: {exc.msg}") from None
    if not isinstance(first, dict):
        raise MalformedLine(path, 1, "manifest must be a JSON object")
    manifest = _parse_manifest(first, path)

    cells: dict[int, dict[int, WorkerStepRecord]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(path, lineno, f"invalid JSON: {exc.msg}") from None
        step, rec = _parse_record(obj, manifest, path, lineno)
        row = cells.setdefault(step, {})
        if rec.rank in row:
            raise DuplicateCell(path, lineno, f"duplicate cell (step={step}, rank={rec.rank})")
        row[rec.rank] = rec

    run = RunLog(manifest)
    if cells:
        for step in range(min(cells), max(cells) + 1):
            row = cells.get(step, {})
            if len(row) == manifest.world_size:
                run.snapshots.append(StepSnapshot(step, tuple(row[r] for r in sorted(row))))
            else:
                run.gaps.append(step)
    if run.gaps:
        logger.warning("%s: %d step(s) with missing rank cells excluded from metrics", path, len(run.gaps))
    return run


def read_log(path) -> RunLog:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LogIOError(f"cannot read log {path}: {exc.strerror or exc}") from exc
    return parse_log(text, path)


# -- summaries --------------------------------------------------------------


@dataclass
class RunSummary:
    run_id: str
    series: list[ConsistencyMetrics]
    means: dict[str, Optional[float]]
    excluded_pairs_total: int
    gaps: int = 0
    label: str = ""

    @property
    def step_count(self) -> int:
        return len(self.series)

    def column(self, name: str) -> list:
        return [getattr(m, name) for m in self.series]


def _run_means(series: Sequence[ConsistencyMetrics]) -> dict[str, Optional[float]]:
    means: dict[str, Optional[float]] = {}
    for name in SUMMARY_METRICS:
        values = [getattr(m, name) for m in series if getattr(m, name) is not None]
        means[name] = math.fsum(values) / len(values) if values else None
    return means


def summarize_run(run: RunLog, label: Optional[str] = None) -> RunSummary:
    if not run.snapshots:
        raise NoCompleteSteps(f"run {run.run_id} has no complete steps")
    series = [metrics.step_metrics(s) for s in run.snapshots]
    return RunSummary(
        run_id=run.run_id,
        series=series,
        means=_run_means(series),
        excluded_pairs_total=sum(m.excluded_pairs for m in series),
        gaps=len(run.gaps),
        label=label if label is not None else run.run_id,
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def series_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics.FIELDS)
    for m in summary.series:
        w.writerow([_fmt(getattr(m, name)) for name in metrics.FIELDS])
    return buf.getvalue()


# -- comparison -------------------------------------------------------------


@dataclass
class ComparisonReport:
    labels: list[str]
    steps_compared: int
    means: dict[str, dict[str, Optional[float]]]
    ordering: dict[str, list[str]]
    # max over shared steps of |mean loss(run) - mean loss(baseline)|
    masking: dict[str, float]
    baseline: str
    warnings: list[str] = field(default_factory=list)

    def higher(self, metric: str, a: str, b: str) -> bool:
        va, vb = self.means[metric][a], self.means[metric][b]
        return va is not None and vb is not None and va > vb

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.labels, "ascending_order"])
        for name in SUMMARY_METRICS:
            w.writerow([name, *(_fmt(self.means[name][lab]) for lab in self.labels), " < ".join(self.ordering[name])])
        w.writerow(["mean_loss_masking", *(_fmt(self.masking[lab]) for lab in self.labels), ""])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max(len("mean_loss_masking"), *(len(n) for n in SUMMARY_METRICS))
        colw = max(12, *(len(lab) for lab in self.labels))
        head = "metric".ljust(width) + "".join(lab.rjust(colw + 2) for lab in self.labels)
        rows = [head, "-" * len(head)]

        def cell(v):
            return ("-" if v is None else f"{v:.6g}").rjust(colw + 2)

        for name in SUMMARY_METRICS:
            rows.append(name.ljust(width) + "".join(cell(self.means[name][lab]) for lab in self.labels))
        rows.append("mean_loss_masking".ljust(width) + "".join(cell(self.masking[lab]) for lab in self.labels))
        rows.append("")
        rows.append(f"steps compared: {self.steps_compared}; masking baseline: {self.baseline}")
        rows.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(rows) + "\n"


def mean_loss_gap(run: RunSummary, baseline: RunSummary, limit: Optional[int] = None) -> list[tuple[int, float]]:
    """Per-step |mean loss(run) - mean loss(baseline)| over the steps both runs have."""
    base = {m.step: m.mean_loss for m in baseline.series[:limit]}
    return [(m.step, abs(m.mean_loss - base[m.step])) for m in run.series[:limit] if m.step in base]


def compare_runs(summaries: Sequence[RunSummary]) -> ComparisonReport:
    """Run-mean table, per-metric ordering and mean-loss masking indicator.

    Runs of unequal length are truncated to the shortest. The first summary
    is the masking baseline.
    """
    if not summaries:
        raise EmptyInput("nothing to compare")
    labels = [s.label or s.run_id for s in summaries]
    if len(set(labels)) != len(labels):
        raise ValueError(f"run labels must be unique, got {labels}")
    warnings = []
    n = min(s.step_count for s in summaries)
    if any(s.step_count != n for s in summaries):
        msg = f"step counts differ {[s.step_count for s in summaries]}; truncated to {n}"
        warnings.append(msg)
        logger.warning(msg)

    means = {name: {} for name in SUMMARY_METRICS}
    for lab, s in zip(labels, summaries):
        run_means = _run_means(s.series[:n])
        for name in SUMMARY_METRICS:
            means[name][lab] = run_means[name]

    def order_key(lab, name):
        v = means[name][lab]
        return (v is None, v if v is not None else 0.0, lab)

    ordering = {name: sorted(labels, key=lambda lab: order_key(lab, name)) for name in SUMMARY_METRICS}
    base = summaries[0]
    masking = {}
    for lab, s in zip(labels, summaries):
        gaps = [g for _, g in mean_loss_gap(s, base, n)]
        masking[lab] = max(gaps) if gaps else 0.0
    return ComparisonReport(labels, n, means, ordering, masking, labels[0], warnings)
