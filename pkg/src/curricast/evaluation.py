"""MAPE at datarow, segment and world level, improvement over a baseline, and
spread of signed errors across runs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from .panel_data import DatarowKey, PanelDataset

logger = logging.getLogger(__name__)

Mode = Literal["per_quarter", "total"]
WORLD = "world"


class EvaluationError(ValueError):
    pass


def mape(pred, actual) -> float:
    """100 x mean |pred - actual| / |actual|, skipping quarters whose actual is zero."""
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise EvaluationError(f"prediction shape {p.shape} != actual shape {a.shape}")
    keep = a != 0
    if not keep.all():
        logger.warning("excluding %d zero actual(s) from MAPE", int((~keep).sum()))
    if not keep.any():
        raise EvaluationError("MAPE undefined: every actual is zero")
    return float(100.0 * np.mean(np.abs(p[keep] - a[keep]) / np.abs(a[keep])))


def signed_percent_error(pred, actual) -> float:
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    keep = a != 0
    if not keep.any():
        raise EvaluationError("percent error undefined: every actual is zero")
    return float(100.0 * np.mean((p[keep] - a[keep]) / np.abs(a[keep])))


def level_mape(pred, actual, mode: Mode = "per_quarter") -> float:
    if mode == "per_quarter":
        return mape(pred, actual)
    if mode == "total":
        return mape([np.sum(pred)], [np.sum(actual)])
    raise EvaluationError(f"unknown MAPE mode {mode!r}")


# --- hierarchy -----------------------------------------------------------------

def test_actuals(panel: PanelDataset, keys: Optional[Sequence[DatarowKey]] = None,
                 train_end: Optional[int] = None, horizon: Optional[int] = None) -> Dict[DatarowKey, np.ndarray]:
    """Actual revenue for the test quarters of rows observed across all of them."""
    te = panel.train_end if train_end is None else train_end
    h = panel.horizon if horizon is None else horizon
    out = {}
    for k in (panel.keys if keys is None else keys):
        row = panel[k]
        if row.covers(te, te + h):
            out[k] = np.array(row.window(te, te + h))
    return out


def aggregate_level(forecasts: Mapping[DatarowKey, np.ndarray], actuals: Mapping[DatarowKey, np.ndarray],
                    level: Literal["segment", "world"]) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Per-quarter sums of forecasts and actuals per group, over rows present in both maps."""
    keys = sorted(set(forecasts) & set(actuals))
    groups: Dict[str, List[DatarowKey]] = {}
    for k in keys:
        g = WORLD if level == "world" else k.segment
        if level not in ("segment", "world"):
            raise EvaluationError(f"unknown level {level!r}")
        groups.setdefault(g, []).append(k)
    return {g: (np.sum([forecasts[k] for k in ks], axis=0), np.sum([actuals[k] for k in ks], axis=0))
            for g, ks in sorted(groups.items())}


# --- reports -------------------------------------------------------------------

@dataclass
class EvaluationReport:
    segment_mape: Dict[str, float]
    world_mape: float
    revenue_weighted_segment_mape: float
    segment_weights: Dict[str, float]
    n_rows: int
    mode: str = "per_quarter"

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(forecasts: Mapping[DatarowKey, np.ndarray], panel: PanelDataset, mode: Mode = "per_quarter",
             keys: Optional[Sequence[DatarowKey]] = None) -> EvaluationReport:
    """Segment and world MAPE over ``keys`` (default: every forecast row with test actuals).

    Segment weights are each segment's share of actual test-period revenue.
    """
    if keys is not None:
        missing = [k for k in keys if k not in forecasts]
        if missing:
            raise EvaluationError(f"no forecast for {len(missing)} requested row(s)")
        forecasts = {k: forecasts[k] for k in keys}
    horizon = _horizon(forecasts)
    actuals = test_actuals(panel, sorted(forecasts), horizon=horizon)
    if not actuals:
        raise EvaluationError("no forecast row has test actuals")
    segs = aggregate_level(forecasts, actuals, "segment")
    world = aggregate_level(forecasts, actuals, "world")[WORLD]
    seg_mape = {s: level_mape(f, a, mode) for s, (f, a) in segs.items()}
    rev = {s: float(a.sum()) for s, (_, a) in segs.items()}
    total = sum(rev.values())
    weights = {s: r / total for s, r in rev.items()}
    weighted = float(sum(weights[s] * seg_mape[s] for s in seg_mape))
    return EvaluationReport(seg_mape, level_mape(*world, mode), weighted, weights, len(actuals), mode)


def _horizon(forecasts: Mapping[DatarowKey, np.ndarray]) -> int:
    lengths = {len(v) for v in forecasts.values()}
    if len(lengths) != 1:
        raise EvaluationError(f"forecasts must share one horizon, got lengths {sorted(lengths)}")
    return lengths.pop()


def improvement(baseline_mape: float, model_mape: float) -> Optional[float]:
    """Percent error reduction; negative when the model is worse, None when the baseline is perfect."""
    if baseline_mape == 0:
        return None
    return (baseline_mape - model_mape) / baseline_mape * 100.0


@dataclass
class ImprovementReport:
    segment: Dict[str, Optional[float]]
    world: Optional[float]
    revenue_weighted_segment: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def improvement_report(model: EvaluationReport, baseline: EvaluationReport) -> ImprovementReport:
    if model.n_rows != baseline.n_rows or set(model.segment_mape) != set(baseline.segment_mape):
        raise EvaluationError("model and baseline reports were computed on different test sets")
    return ImprovementReport(
        {s: improvement(baseline.segment_mape[s], model.segment_mape[s]) for s in model.segment_mape},
        improvement(baseline.world_mape, model.world_mape),
        improvement(baseline.revenue_weighted_segment_mape, model.revenue_weighted_segment_mape))


def report_to_csv(report: EvaluationReport, header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "group", "mape", "weight"])
    for s in sorted(report.segment_mape):
        w.writerow(["segment", s, repr(report.segment_mape[s]), repr(report.segment_weights[s])])
    w.writerow(["segment", "revenue_weighted", repr(report.revenue_weighted_segment_mape), ""])
    w.writerow(["world", WORLD, repr(report.world_mape), ""])
    return buf.getvalue()


# --- run-to-run spread -----------------------------------------------------------

def per_run_signed_errors(run_forecasts: Sequence[Mapping[DatarowKey, np.ndarray]], panel: PanelDataset,
                          keys: Optional[Sequence[DatarowKey]] = None) -> Dict[str, np.ndarray]:
    """Signed percent error per run for the world and each segment ("segment:<name>")."""
    if not run_forecasts:
        raise EvaluationError("no runs")
    if keys is None:
        keys = sorted(set.intersection(*(set(f) for f in run_forecasts)))
    horizon = _horizon({k: run_forecasts[0][k] for k in keys})
    actuals = test_actuals(panel, keys, horizon=horizon)
    out: Dict[str, List[float]] = {}
    for fc in run_forecasts:
        sub = {k: fc[k] for k in actuals}
        for lvl in ("world", "segment"):
            for g, (f, a) in aggregate_level(sub, actuals, lvl).items():
                name = WORLD if lvl == "world" else f"segment:{g}"
                out.setdefault(name, []).append(signed_percent_error(f, a))
    return {k: np.array(v) for k, v in out.items()}


@dataclass
class DensitySummary:
    mean: float
    std: float
    variance: float
    bin_edges: List[float]
    counts: List[int]
    n_runs: int


def density_summary(errors: Mapping[str, Sequence[float]], bins: int = 10) -> Dict[str, DensitySummary]:
    """Bias (mean), population std and histogram of signed errors per level."""
    out = {}
    for level, e in errors.items():
        e = np.asarray(e, dtype=np.float64)
        if len(e) < 2:
            raise EvaluationError(f"density summary needs >= 2 runs, level {level!r} has {len(e)}")
        counts, edges = np.histogram(e, bins=bins)
        std = float(np.std(e))
        out[level] = DensitySummary(float(np.mean(e)), std, std * std, edges.tolist(), counts.tolist(), len(e))
    return out


def density_to_csv(summaries: Mapping[str, DensitySummary], header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "bin_lo", "bin_hi", "count"])
    for level in sorted(summaries):
        s = summaries[level]
        for lo, hi, c in zip(s.bin_edges[:-1], s.bin_edges[1:], s.counts):
            w.writerow([level, repr(lo), repr(hi), c])
    return buf.getvalue()


def to_json(obj) -> str:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(f"not serialisable: {type(o).__name__}")

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    return json.dumps(clean(json.loads(json.dumps(obj, default=default))), indent=1, sort_keys=True)
