"""Per-row log/de-mean transforms and multiplicative STL decomposition.

Multiplicative STL is run as additive STL on log revenue, then the three
components are exponentiated, so trend x seasonal x residual reproduces the
input exactly up to rounding.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Optional

import numpy as np

from .panel_data import Datarow, DatarowKey

PERIOD = 4


class DomainError(ValueError):
    pass


class InsufficientHistoryError(ValueError):
    pass


# --- log / de-mean -----------------------------------------------------------

@dataclass(frozen=True)
class TransformState:
    key: Optional[DatarowKey]
    log_mean: float


def _as_series(row) -> tuple[Optional[DatarowKey], int, np.ndarray]:
    if isinstance(row, Datarow):
        return row.key, row.first_quarter, np.asarray(row.values, dtype=np.float64)
    return None, 0, np.asarray(row, dtype=np.float64)


def forward_transform(row, train_end: int) -> tuple[np.ndarray, TransformState]:
    """log(revenue) minus the mean log revenue over quarters < ``train_end``.

    ``row`` is a Datarow or a plain sequence taken to start at quarter 0.
    The transformed series covers every quarter of the row.
    """
    key, first, values = _as_series(row)
    if not np.all(values > 0):
        bad = np.flatnonzero(~(values > 0))
        raise DomainError(f"log transform needs positive values; offending quarters {(first + bad).tolist()}")
    n_train = min(max(train_end - first, 0), len(values))
    if n_train == 0:
        raise InsufficientHistoryError("no training quarters before train_end")
    logs = np.log(values)
    log_mean = float(np.mean(logs[:n_train]))
    return logs - log_mean, TransformState(key, log_mean)


def inverse_transform(series, state: TransformState) -> np.ndarray:
    return np.exp(np.asarray(series, dtype=np.float64) + state.log_mean)


# --- loess + STL core ----------------------------------------------------------

def loess(x: np.ndarray, y: np.ndarray, x_eval: np.ndarray, span: int, degree: int = 1) -> np.ndarray:
    """Tricube-weighted local regression (degree 0 or 1) evaluated at ``x_eval``.

    The bandwidth is the distance to the ``span``-th nearest point; when the
    span exceeds the number of points it is widened as in Cleveland et al.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    q = min(span, n)
    out = np.empty(len(x_eval))
    for j, x0 in enumerate(np.asarray(x_eval, dtype=np.float64)):
        d = np.abs(x - x0)
        h = np.partition(d, q - 1)[q - 1]
        if span > n:
            h += (span - n) / 2.0
        if h <= 0:
            w = (d == 0).astype(np.float64)
        else:
            r = d / h
            w = np.where(r < 1.0, (1.0 - r ** 3) ** 3, 0.0)
        sw = w.sum()
        if sw <= 0:
            w = np.ones(n)
            sw = float(n)
        xm = float(w @ x) / sw
        ym = float(w @ y) / sw
        if degree == 0:
            out[j] = ym
            continue
        sxx = float(w @ (x - xm) ** 2)
        if sxx <= 1e-12 * max(1.0, xm * xm) * sw:
            out[j] = ym
        else:
            slope = float(w @ ((x - xm) * (y - ym))) / sxx
            out[j] = ym + slope * (x0 - xm)
    return out


def _moving_average(a: np.ndarray, n: int) -> np.ndarray:
    c = np.cumsum(np.concatenate([[0.0], a]))
    return (c[n:] - c[:-n]) / n


def _next_odd(v: float) -> int:
    k = math.ceil(v)
    return k if k % 2 else k + 1


def default_trend_span(period: int, seasonal_span: int) -> int:
    return _next_odd(1.5 * period / (1.0 - 1.5 / seasonal_span))


def stl_additive(y: np.ndarray, period: int, phase0: int = 0, mode: str = "periodic",
                 seasonal_span: int = 7, trend_span: Optional[int] = None,
                 inner_iterations: int = 2):
    """Additive STL without robustness weights. Returns (trend, seasonal, residual).

    ``phase0`` is the position of ``y[0]`` within the cycle, so subseries are
    aligned to the calendar rather than to the start of the row.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if trend_span is None:
        trend_span = default_trend_span(period, seasonal_span)
    lowpass_span = _next_odd(period)
    idx = np.arange(n)
    trend = np.zeros(n)
    seasonal = np.zeros(n)
    for _ in range(inner_iterations):
        detr = y - trend
        # cycle-subseries smoothing, extended one cycle on each side
        ext = np.empty(n + 2 * period)
        for ph in range(period):
            sel = idx[(idx + phase0) % period == ph]
            pos_ext = np.concatenate([[sel[0] - period], sel, [sel[-1] + period]])
            if mode == "periodic":
                vals = np.full(len(pos_ext), detr[sel].mean())
            elif mode == "loess":
                vals = loess(sel.astype(float), detr[sel], pos_ext.astype(float), seasonal_span)
            else:
                raise ValueError(f"unknown seasonal mode {mode!r}")
            ext[pos_ext + period] = vals
        if mode == "periodic":
            # the low-pass of an exactly periodic sequence is its cycle mean
            low = np.full(n, ext[period:2 * period].mean())
        else:
            lp = _moving_average(_moving_average(_moving_average(ext, period), period), 3)
            low = loess(idx.astype(float), lp, idx.astype(float), lowpass_span)
        seasonal = ext[period:period + n] - low
        trend = loess(idx.astype(float), y - seasonal, idx.astype(float), trend_span)
    return trend, seasonal, y - trend - seasonal


# --- multiplicative decomposition ----------------------------------------------

@dataclass(frozen=True)
class Decomposition:
    """Components over fitted quarters ``first_quarter .. first_quarter + n - 1``.

    Components are stored in log space; the positive multiplicative factors
    are exposed as properties.
    """

    key: Optional[DatarowKey]
    first_quarter: int
    log_trend: np.ndarray
    log_seasonal: np.ndarray
    log_residual: np.ndarray
    period: int = PERIOD

    @property
    def trend(self) -> np.ndarray:
        return np.exp(self.log_trend)

    @property
    def seasonal(self) -> np.ndarray:
        return np.exp(self.log_seasonal)

    @property
    def residual(self) -> np.ndarray:
        return np.exp(self.log_residual)

    @property
    def end_quarter(self) -> int:
        return self.first_quarter + len(self.log_trend)

    @property
    def quarters(self) -> np.ndarray:
        return np.arange(self.first_quarter, self.end_quarter)

    def seasonal_at(self, quarters) -> np.ndarray:
        """Seasonal factors; quarters after the fit repeat the last fitted cycle."""
        q = np.atleast_1d(np.asarray(quarters, dtype=np.int64))
        if np.any(q < self.first_quarter):
            raise InsufficientHistoryError(f"no seasonal estimate before quarter {self.first_quarter}")
        last = self.end_quarter - 1
        over = q > last
        folded = q.copy()
        folded[over] = last - ((last - q[over]) % self.period)
        return np.exp(self.log_seasonal[folded - self.first_quarter])


def stl_decompose(row: Datarow, train_end: int, period: int = PERIOD,
                  mode: Literal["periodic", "loess"] = "periodic", *,
                  seasonal_span: int = 7, trend_span: Optional[int] = None) -> Decomposition:
    """Multiplicative STL of the row's quarters before ``train_end``."""
    hist = row.history(train_end)
    if len(hist) < 2 * period:
        raise InsufficientHistoryError(
            f"{row.key.label()}: {len(hist)} quarters before {train_end}, need >= {2 * period}")
    T, S, R = stl_additive(np.log(hist), period, phase0=row.first_quarter % period, mode=mode,
                           seasonal_span=seasonal_span, trend_span=trend_span)
    return Decomposition(row.key, row.first_quarter, T, S, R, period)


def deseasonalize(row: Datarow, d: Decomposition) -> Datarow:
    return Datarow(row.key, row.first_quarter, row.values / d.seasonal_at(row.quarters))


def reseasonalize(forecasts, d: Decomposition, first_quarter: int) -> np.ndarray:
    """Multiply forecasts for quarters ``first_quarter ..`` by the seasonal factor a year earlier."""
    f = np.asarray(forecasts, dtype=np.float64)
    prior = first_quarter + np.arange(len(f)) - d.period
    if len(f) and (prior.min() < d.first_quarter or prior.max() >= d.end_quarter):
        raise InsufficientHistoryError(
            f"prior-year seasonal factors for quarters {prior.tolist()} are outside the fitted range "
            f"[{d.first_quarter}, {d.end_quarter})")
    return f * np.exp(d.log_seasonal[prior - d.first_quarter])


def residual_score(d: Decomposition) -> float:
    """RMS distance of the multiplicative residual from 1 over the fitted quarters."""
    return float(np.sqrt(np.mean((d.residual - 1.0) ** 2)))


def decompositions_to_csv(decomps: Iterable[Decomposition]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment", "region", "product", "quarter", "trend", "seasonal", "residual"])
    for d in sorted(decomps, key=lambda d: d.key):
        for q, t, s, r in zip(d.quarters, d.trend, d.seasonal, d.residual):
            w.writerow([*d.key, int(q), repr(float(t)), repr(float(s)), repr(float(r))])
    return buf.getvalue()
