"""Training orchestration.

LSTM variants walk a fixed-size window forward one quarter at a time over
the training quarters, warm-starting each window from the previous one. DCNN
variants train on each row's whole training history at once. Curriculum
variants run k stages of p epochs, adding one difficulty batch per stage
(inside every window for the LSTM). After training, every row with enough
history is forecast, including rows that were too short to train on.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import curriculum as cur
from .forecasters import (DcnnBatch, DcnnForecasterConfig, FeatureEncoder, LstmBatch,
                          LstmForecasterConfig, ModelState, config_hash, dcnn_forecast,
                          dcnn_train_step, init_dcnn, init_lstm, lstm_forecast, lstm_train_step)
from .forecasters.lstm import forward_teacher_forced
from .nn import TrainingError, XorShift64Star, mae_loss
from .panel_data import Datarow, DatarowKey, PanelDataset, panel_to_csv, split_eligibility
from .preprocess import (Decomposition, InsufficientHistoryError, TransformState, deseasonalize,
                         forward_transform, inverse_transform, reseasonalize, stl_decompose)

logger = logging.getLogger(__name__)


class Variant(NamedTuple):
    family: str
    covariates: bool
    seasonality: bool
    curriculum: bool


VARIANTS: Dict[str, Variant] = {
    "lstm_basic": Variant("lstm", False, False, False),
    "lstm_cat": Variant("lstm", True, False, False),
    "lstm_seasonal": Variant("lstm", True, True, False),
    "lstm_curriculum": Variant("lstm", True, True, True),
    "dcnn_basic": Variant("dcnn", False, False, False),
    "dcnn_cat": Variant("dcnn", True, False, False),
    "dcnn_curriculum": Variant("dcnn", True, False, True),
}

DEFAULT_K = {"lstm": 5, "dcnn": 8}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    variant: str = "lstm_curriculum"
    window_size: int = 15
    horizon: int = 4
    train_end: Optional[int] = None         # quarters used for training; None -> panel's
    epochs_per_window: int = 75             # LSTM without curriculum
    dcnn_epochs: int = 300                  # DCNN without curriculum
    p: int = 75
    k: Optional[int] = None                 # None -> 5 for LSTM, 8 for DCNN
    ordering: str = "ascending"
    grouping: str = "uniform"
    weighting: str = "uniform"
    runs: int = 30
    seed_base: int = 0
    batch_size: int = 64
    hidden_size: int = 64
    learning_rate: float = 1e-3
    min_history: int = 15
    stl_mode: str = "periodic"
    dcnn_layers: int = 10
    dcnn_filters: int = 6
    dcnn_head: int = 128

    def __post_init__(self):
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if not self.window_size > self.horizon >= 1:
            errs.append("need window_size > horizon >= 1")
        for name in ("epochs_per_window", "dcnn_epochs", "p", "runs", "batch_size", "hidden_size",
                     "min_history", "dcnn_layers", "dcnn_filters", "dcnn_head"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.k is not None and self.k < 1:
            errs.append("k must be >= 1")
        if self.ordering not in ("ascending", "descending"):
            errs.append(f"ordering must be ascending|descending, got {self.ordering!r}")
        if self.grouping not in ("uniform", "by_segment"):
            errs.append(f"grouping must be uniform|by_segment, got {self.grouping!r}")
        if self.weighting not in ("uniform", "segment_revenue", "segment_revenue_raw"):
            errs.append(f"unknown weighting {self.weighting!r}")
        if self.stl_mode not in ("periodic", "loess"):
            errs.append(f"stl_mode must be periodic|loess, got {self.stl_mode!r}")
        if not 0 <= self.seed_base < 2 ** 64:
            errs.append("seed_base must be a 64-bit unsigned integer")
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def spec(self) -> Variant:
        return VARIANTS[self.variant]

    @property
    def n_batches(self) -> int:
        return self.k if self.k is not None else DEFAULT_K[self.spec.family]

    @property
    def encoder_length(self) -> int:
        return self.window_size - self.horizon

    def resolved_train_end(self, panel: PanelDataset) -> int:
        te = panel.train_end if self.train_end is None else self.train_end
        if te + self.horizon > panel.n_quarters:
            raise ConfigError(f"train_end {te} + horizon {self.horizon} exceeds {panel.n_quarters} quarters")
        if te < 1:
            raise ConfigError("train_end must be >= 1")
        return te

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


# --- data preparation ----------------------------------------------------------

@dataclass(frozen=True)
class PreparedRow:
    """Transformed training history of one row; nothing at or after train_end."""

    key: DatarowKey
    first_quarter: int
    series: np.ndarray
    transform: TransformState
    decomposition: Optional[Decomposition]
    covariates: np.ndarray

    @property
    def end_quarter(self) -> int:
        return self.first_quarter + len(self.series)


@dataclass(frozen=True)
class PreparedPanel:
    rows: Dict[DatarowKey, PreparedRow]
    trainable: Tuple[DatarowKey, ...]
    out_of_sample: Tuple[DatarowKey, ...]
    train_end: int
    encoder: FeatureEncoder
    segment_revenue: Dict[str, float]
    row_revenue: Dict[DatarowKey, float]
    skipped: Tuple[DatarowKey, ...] = ()   # reach train_end but cannot be modelled by this variant


def prepare_panel(panel: PanelDataset, config: TrainingConfig) -> PreparedPanel:
    """Truncate rows at train_end, decompose where needed, and log/de-mean.

    Rows whose history does not reach the last training quarter are dropped.
    """
    te = config.resolved_train_end(panel)
    spec = config.spec
    split = split_eligibility(panel, config.min_history, te)
    need_stl = spec.seasonality or spec.curriculum
    encoder = FeatureEncoder.from_panel(panel)
    rows: Dict[DatarowKey, PreparedRow] = {}
    skipped = []
    for row in panel.rows:
        if row.end_quarter < te or row.first_quarter >= te:
            continue
        hist = Datarow(row.key, row.first_quarter, row.history(te))
        decomp = None
        if need_stl and len(hist.values) >= 8:
            decomp = stl_decompose(hist, te, mode=config.stl_mode)
        source = hist
        if spec.seasonality:
            if decomp is None:
                skipped.append(row.key)   # cannot reseasonalize without a fitted seasonal cycle
                continue
            source = deseasonalize(hist, decomp)
        series, state = forward_transform(source, te)
        series.setflags(write=False)
        rows[row.key] = PreparedRow(row.key, row.first_quarter, series, state, decomp,
                                    encoder.encode(row.key).one_hot)
    trainable = tuple(sorted(k for k in split.trainable if k in rows))
    oos = tuple(sorted(k for k in rows if k not in split.trainable))
    row_rev = {k: float(panel[k].history(te).sum()) for k in trainable}
    seg_rev: Dict[str, float] = {}
    for k, v in row_rev.items():
        seg_rev[k.segment] = seg_rev.get(k.segment, 0.0) + v
    return PreparedPanel(rows, trainable, oos, te, encoder, seg_rev, row_rev, tuple(skipped))


def build_curriculum(prepared: PreparedPanel, config: TrainingConfig, seed: int) -> cur.CurriculumPlan:
    decomps = {k: prepared.rows[k].decomposition for k in prepared.trainable}
    missing = [k for k, d in decomps.items() if d is None]
    if missing:
        raise cur.CurriculumError(f"{len(missing)} trainable rows lack a decomposition")
    scores = cur.score_datarows(decomps, config.weighting, prepared.segment_revenue)
    k = min(config.n_batches, len(scores)) if config.grouping == "uniform" else config.n_batches
    return cur.build_plan(scores, k, config.ordering, config.grouping, config.p, seed,
                          row_revenue=prepared.row_revenue)


# --- instrumentation -----------------------------------------------------------

class TrainingMonitor:
    """Hooks for tests and diagnostics; the default does nothing."""

    def on_window_start(self, window: int, state: ModelState) -> None: ...

    def on_window_end(self, window: int, state: ModelState) -> None: ...

    def on_update(self, window: Optional[int], stage: Optional[int], epoch: int,
                  provenance: Sequence[Tuple[DatarowKey, int, int]]) -> None:
        """``provenance`` lists (key, first quarter, last quarter) for each example in the update."""


class LossRecord(NamedTuple):
    window: Optional[int]
    stage: Optional[int]
    epoch: int
    loss: float


# --- LSTM rolling window ---------------------------------------------------------

def lstm_config_for(config: TrainingConfig, prepared: PreparedPanel) -> LstmForecasterConfig:
    spec = config.spec
    return LstmForecasterConfig(hidden_size=config.hidden_size, encoder_length=config.encoder_length,
                                horizon=config.horizon, use_covariates=spec.covariates,
                                use_seasonality=spec.seasonality,
                                n_covariates=prepared.encoder.size if spec.covariates else 0,
                                learning_rate=config.learning_rate)


def window_offsets(train_end: int, window_size: int) -> List[int]:
    return list(range(0, train_end - window_size + 1))


class _Examples(NamedTuple):
    keys: List[DatarowKey]
    encoder: np.ndarray
    targets: np.ndarray
    covariates: np.ndarray


def window_examples(prepared: PreparedPanel, keys: Sequence[DatarowKey], offset: int,
                    encoder_length: int, horizon: int) -> _Examples:
    stop = offset + encoder_length + horizon
    if stop > prepared.train_end:
        raise ValueError(f"window [{offset}, {stop}) runs past train_end {prepared.train_end}")
    chosen, enc, tgt, cov = [], [], [], []
    for k in keys:
        r = prepared.rows[k]
        if r.first_quarter <= offset and stop <= r.end_quarter:
            w = r.series[offset - r.first_quarter: stop - r.first_quarter]
            chosen.append(k)
            enc.append(w[:encoder_length])
            tgt.append(w[encoder_length:])
            cov.append(r.covariates)
    n_cov = prepared.encoder.size
    return _Examples(chosen,
                     np.array(enc).reshape(len(chosen), encoder_length),
                     np.array(tgt).reshape(len(chosen), horizon),
                     np.array(cov).reshape(len(chosen), n_cov))


def _lstm_epoch(state, ex: _Examples, idx: List[int], cfg: LstmForecasterConfig, batch_size: int,
                offset: int, window: int, stage, epoch: int, monitor: Optional[TrainingMonitor]) -> float:
    total, count = 0.0, 0
    stop = offset + cfg.window_size - 1
    for a in range(0, len(idx), batch_size):
        sel = np.array(idx[a:a + batch_size])
        batch = LstmBatch(ex.encoder[sel], ex.targets[sel],
                          ex.covariates[sel] if cfg.use_covariates else None)
        if monitor is not None:
            monitor.on_update(window, stage, epoch, [(ex.keys[i], offset, stop) for i in sel])
        loss, _ = lstm_train_step(batch, state)
        total += loss * len(sel)
        count += len(sel)
    return total / count if count else float("nan")


def run_rolling_window(prepared: PreparedPanel, config: TrainingConfig, seed: int,
                       plan: Optional[cur.CurriculumPlan] = None,
                       monitor: Optional[TrainingMonitor] = None,
                       state: Optional[ModelState] = None):
    """Train an LSTM over all windows; returns ``(state, loss_trace, diagnostics)``."""
    spec = config.spec
    if spec.family != "lstm":
        raise ConfigError(f"{config.variant} is not an LSTM variant")
    if not prepared.trainable:
        raise TrainingError("no trainable rows")
    if spec.curriculum and plan is None:
        raise ConfigError("curriculum variants need a plan")
    cfg = lstm_config_for(config, prepared)
    if state is None:
        state = init_lstm(cfg, seed)
    shuffler = XorShift64Star(seed).spawn(0x5EED)
    offsets = window_offsets(prepared.train_end, config.window_size)
    trace: List[LossRecord] = []
    diagnostics: List[float] = []
    holdout = window_examples(prepared, prepared.trainable, offsets[-1], cfg.encoder_length, cfg.horizon) \
        if offsets else None

    for w, offset in enumerate(offsets):
        if monitor is not None:
            monitor.on_window_start(w, state)
        ex = window_examples(prepared, prepared.trainable, offset, cfg.encoder_length, cfg.horizon)
        pos = {k: i for i, k in enumerate(ex.keys)}
        if spec.curriculum:
            stages = [(s, [pos[k] for k in sorted(cur.stage_training_set(plan, s)) if k in pos])
                      for s in range(1, plan.k + 1)]
            epochs = plan.epochs_per_stage
        else:
            stages = [(None, list(range(len(ex.keys))))]
            epochs = config.epochs_per_window
        for stage, idx in stages:
            for epoch in range(epochs):
                order = list(idx)
                shuffler.shuffle(order)
                loss = _lstm_epoch(state, ex, order, cfg, config.batch_size, offset, w, stage, epoch, monitor)
                trace.append(LossRecord(w, stage, epoch, loss))
        if holdout is not None and len(holdout.keys):
            diagnostics.append(_holdout_loss(state, holdout, cfg))
        if monitor is not None:
            monitor.on_window_end(w, state)
    return state, trace, diagnostics


def _holdout_loss(state: ModelState, ex: _Examples, cfg: LstmForecasterConfig) -> float:
    # inference-mode MAE on the final training window; reported only, never used to pick weights
    pred = lstm_forecast(ex.encoder, state, cfg.horizon, ex.covariates if cfg.use_covariates else None)
    return mae_loss(pred, ex.targets)[0]


# --- DCNN full history -------------------------------------------------------------

def dcnn_config_for(config: TrainingConfig, prepared: PreparedPanel) -> DcnnForecasterConfig:
    spec = config.spec
    return DcnnForecasterConfig(n_layers=config.dcnn_layers, filters=config.dcnn_filters,
                                head_size=config.dcnn_head, use_covariates=spec.covariates,
                                n_covariates=prepared.encoder.size if spec.covariates else 0,
                                learning_rate=config.learning_rate)


def _aligned(prepared: PreparedPanel, keys: Sequence[DatarowKey], end: int):
    """Right-align histories ending at ``end`` into (B, end) arrays."""
    series = np.zeros((len(keys), end))
    observed = np.zeros((len(keys), end), dtype=bool)
    cov = np.zeros((len(keys), prepared.encoder.size))
    for i, k in enumerate(keys):
        r = prepared.rows[k]
        series[i, r.first_quarter:r.end_quarter] = r.series
        observed[i, r.first_quarter:r.end_quarter] = True
        cov[i] = r.covariates
    return series, observed, cov


def run_full_history(prepared: PreparedPanel, config: TrainingConfig, seed: int,
                     plan: Optional[cur.CurriculumPlan] = None,
                     monitor: Optional[TrainingMonitor] = None):
    """Train a DCNN on every trainable row's full training history."""
    spec = config.spec
    if spec.family != "dcnn":
        raise ConfigError(f"{config.variant} is not a DCNN variant")
    if not prepared.trainable:
        raise TrainingError("no trainable rows")
    if spec.curriculum and plan is None:
        raise ConfigError("curriculum variants need a plan")
    cfg = dcnn_config_for(config, prepared)
    state = init_dcnn(cfg, seed)
    shuffler = XorShift64Star(seed).spawn(0x5EED)
    keys = list(prepared.trainable)
    series, observed, cov = _aligned(prepared, keys, prepared.train_end)
    pos = {k: i for i, k in enumerate(keys)}
    if spec.curriculum:
        stages = [(s, [pos[k] for k in sorted(cur.stage_training_set(plan, s))]) for s in range(1, plan.k + 1)]
        epochs = plan.epochs_per_stage
    else:
        stages = [(None, list(range(len(keys))))]
        epochs = config.dcnn_epochs
    trace: List[LossRecord] = []
    for stage, idx in stages:
        for epoch in range(epochs):
            order = list(idx)
            shuffler.shuffle(order)
            total, count = 0.0, 0
            for a in range(0, len(order), config.batch_size):
                sel = np.array(order[a:a + config.batch_size])
                if monitor is not None:
                    monitor.on_update(None, stage, epoch,
                                      [(keys[i], prepared.rows[keys[i]].first_quarter, prepared.train_end - 1)
                                       for i in sel])
                batch = DcnnBatch(series[sel], observed[sel], cov[sel] if cfg.use_covariates else None)
                loss, _ = dcnn_train_step(batch, state)
                total += loss * len(sel)
                count += len(sel)
            trace.append(LossRecord(None, stage, epoch, total / count))
    return state, trace, []


# --- inference ---------------------------------------------------------------------

def forecast_rows(prepared: PreparedPanel, state: ModelState, config: TrainingConfig):
    """Revenue forecasts for test quarters ``train_end ..`` of every forecastable row.

    Returns ``(forecasts, unforecastable)``.
    """
    spec = config.spec
    h = config.horizon
    te = prepared.train_end
    keys = sorted(prepared.rows)
    out: Dict[DatarowKey, np.ndarray] = {}
    bad: List[DatarowKey] = list(prepared.skipped)
    if spec.family == "lstm":
        L = config.encoder_length
        ok = [k for k in keys if len(prepared.rows[k].series) >= L]
        bad += [k for k in keys if len(prepared.rows[k].series) < L]
        if ok:
            hist = np.stack([prepared.rows[k].series[-L:] for k in ok])
            cov = np.stack([prepared.rows[k].covariates for k in ok]) if state.config.use_covariates else None
            pred = lstm_forecast(hist, state, h, cov)
            for k, p in zip(ok, pred):
                out[k] = _to_revenue(prepared.rows[k], p, spec.seasonality, te)
    else:
        if keys:
            series, observed, cov = _aligned(prepared, keys, te)
            pred = dcnn_forecast(series, state, h, cov if state.config.use_covariates else None,
                                 observed=observed)
            for k, p in zip(keys, pred):
                out[k] = _to_revenue(prepared.rows[k], p, False, te)
    return out, sorted(bad)


def _to_revenue(row: PreparedRow, pred: np.ndarray, seasonal: bool, te: int) -> np.ndarray:
    rev = inverse_transform(pred, row.transform)
    if seasonal:
        rev = reseasonalize(rev, row.decomposition, te)
    return rev


# --- runs ----------------------------------------------------------------------------

@dataclass
class RunResult:
    run_index: int
    seed: int
    forecasts: Dict[DatarowKey, np.ndarray] = field(default_factory=dict)
    loss_trace: List[LossRecord] = field(default_factory=list)
    diagnostics: List[float] = field(default_factory=list)
    unforecastable: List[DatarowKey] = field(default_factory=list)
    trainable: Tuple[DatarowKey, ...] = ()
    state: Optional[ModelState] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def train_single(prepared: PreparedPanel, config: TrainingConfig, run_index: int,
                 monitor: Optional[TrainingMonitor] = None) -> RunResult:
    seed = (config.seed_base + run_index) % 2 ** 64
    result = RunResult(run_index, seed, trainable=prepared.trainable)
    plan = build_curriculum(prepared, config, seed) if config.spec.curriculum else None
    try:
        if config.spec.family == "lstm":
            state, trace, diag = run_rolling_window(prepared, config, seed, plan, monitor)
        else:
            state, trace, diag = run_full_history(prepared, config, seed, plan, monitor)
        result.forecasts, result.unforecastable = forecast_rows(prepared, state, config)
    except (TrainingError, FloatingPointError) as exc:
        logger.warning("run %d (seed %d) failed: %s", run_index, seed, exc)
        result.error = f"{type(exc).__name__}: {exc}"
        return result
    result.state, result.loss_trace, result.diagnostics = state, trace, diag
    return result


def _run_worker(args):
    prepared, config, i = args
    return train_single(prepared, config, i)


def run_experiment(panel: PanelDataset, config: TrainingConfig, parallel: int = 1,
                   monitor: Optional[TrainingMonitor] = None,
                   prepared: Optional[PreparedPanel] = None) -> List[RunResult]:
    """``config.runs`` independent trainings with seeds ``seed_base + i``, ordered by run index."""
    prepared = prepared or prepare_panel(panel, config)
    if not prepared.trainable:
        raise TrainingError("no trainable rows in panel")
    jobs = [(prepared, config, i) for i in range(config.runs)]
    if parallel > 1 and config.runs > 1 and monitor is None:
        with ProcessPoolExecutor(max_workers=min(parallel, config.runs)) as ex:
            results = list(ex.map(_run_worker, jobs))
    else:
        results = [train_single(prepared, config, i, monitor) for _, _, i in jobs]
    return sorted(results, key=lambda r: r.run_index)


class AggregationError(ValueError):
    pass


def aggregate_runs(results: Sequence[RunResult]) -> Dict[DatarowKey, np.ndarray]:
    """Per-row, per-quarter mean over successful runs."""
    good = [r for r in results if r.ok]
    for r in results:
        if not r.ok:
            logger.warning("excluding failed run %d from the average: %s", r.run_index, r.error)
    if not good:
        raise AggregationError("no successful runs to aggregate")
    sums: Dict[DatarowKey, np.ndarray] = {}
    counts: Dict[DatarowKey, int] = {}
    for r in good:
        for k, f in r.forecasts.items():
            if k in sums:
                sums[k] = sums[k] + f
            else:
                sums[k] = np.array(f, dtype=np.float64)
            counts[k] = counts.get(k, 0) + 1
    return {k: sums[k] / counts[k] for k in sorted(sums)}


# --- persistence --------------------------------------------------------------------

FORECAST_COLUMNS = ("run", "segment", "region", "product", "quarter", "forecast")


def forecasts_to_csv(per_run: Sequence[Tuple[int, Mapping[DatarowKey, np.ndarray]]], panel: PanelDataset,
                     first_quarter: int, header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FORECAST_COLUMNS)
    for run, fc in per_run:
        for k in sorted(fc):
            for j, v in enumerate(fc[k]):
                w.writerow([run, *k, panel.quarter_label(first_quarter + j), repr(float(v))])
    return buf.getvalue()


def read_forecasts_csv(text: str, panel: PanelDataset) -> Dict[object, Dict[DatarowKey, np.ndarray]]:
    """Forecasts by run label (an int for training runs, else the label string)."""
    from .panel_data import _quarter_ordinal, parse_quarter
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    missing = [c for c in FORECAST_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ValueError(f"forecast file lacks column(s) {missing}")
    base = _quarter_ordinal(panel.epoch)
    acc: Dict[int, Dict[DatarowKey, Dict[int, float]]] = {}
    for rec in reader:
        q = _quarter_ordinal(parse_quarter(rec["quarter"])) - base
        k = DatarowKey(rec["segment"], rec["region"], rec["product"])
        run = rec["run"]
        acc.setdefault(int(run) if run.lstrip("-").isdigit() else run, {}).setdefault(k, {})[q] = float(rec["forecast"])
    out = {}
    for run, rows in acc.items():
        out[run] = {k: np.array([qs[q] for q in sorted(qs)]) for k, qs in rows.items()}
    return out


def panel_hash(panel: PanelDataset) -> str:
    return hashlib.sha256(panel_to_csv(panel).encode()).hexdigest()


def experiment_manifest(panel: PanelDataset, config: TrainingConfig, results: Sequence[RunResult]) -> dict:
    return {
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "panel_sha256": panel_hash(panel),
        "runs": [{"run": r.run_index, "seed": r.seed, "ok": r.ok, "error": r.error,
                  "n_forecasts": len(r.forecasts), "n_unforecastable": len(r.unforecastable)}
                 for r in results],
    }
