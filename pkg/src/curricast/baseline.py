"""Classical comparison baseline: seasonal naive, multiplicative Holt-Winters,
and a history-length dispatch that averages the two when both apply."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .panel_data import DatarowKey, PanelDataset

logger = logging.getLogger(__name__)

PERIOD = 4
GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
# forecasts are floored at this fraction of the smallest training value so they stay positive
FLOOR_FRACTION = 1e-3


class BaselineError(ValueError):
    pass


def _check(y, need: int, what: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or len(y) < need:
        raise BaselineError(f"{what} needs >= {need} observed quarters, got {len(y) if y.ndim == 1 else y.shape}")
    if not np.all(y > 0):
        raise BaselineError(f"{what} needs positive values")
    return y


def seasonal_naive(history, horizon: int, period: int = PERIOD) -> np.ndarray:
    """Forecast for step j repeats the value one period earlier."""
    y = np.asarray(history, dtype=np.float64)
    if y.ndim != 1 or len(y) < period:
        raise BaselineError(f"seasonal naive needs >= {period} observed quarters, got {len(y)}")
    last = y[-period:]
    return np.array([last[j % period] for j in range(horizon)])


@dataclass(frozen=True)
class HoltWintersState:
    level: float
    trend: float
    seasonals: Tuple[float, ...]      # the last ``period`` factors, oldest first
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if not all(s > 0 for s in self.seasonals):
            raise BaselineError("seasonal factors must be positive")
        for name in ("alpha", "beta", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise BaselineError(f"{name} must lie in [0, 1]")

    def forecast(self, horizon: int) -> np.ndarray:
        m = len(self.seasonals)
        h = np.arange(1, horizon + 1)
        s = np.array(self.seasonals)[(h - 1) % m]
        return (self.level + h * self.trend) * s


class Recursion(NamedTuple):
    level: np.ndarray
    trend: np.ndarray
    seasonal: np.ndarray       # factor in force after each observation
    one_step: np.ndarray       # forecast of y[t] made at t - 1


def holt_winters_recursion(y, level0, trend0, seasonals0, alpha, beta, gamma) -> Recursion:
    """Multiplicative Holt-Winters updates over ``y``, broadcasting over parameter arrays.

    ``seasonals0`` holds the factors for the ``m`` periods before ``y[0]``.
    Scalar or same-shape array arguments are accepted, so a whole parameter
    grid can be run in one pass.
    """
    y = np.asarray(y, dtype=np.float64)
    alpha, beta, gamma = (np.asarray(a, dtype=np.float64) for a in (alpha, beta, gamma))
    shape = np.broadcast(alpha, beta, gamma, np.asarray(level0, dtype=np.float64)).shape
    l = np.broadcast_to(np.asarray(level0, dtype=np.float64), shape).copy()
    b = np.broadcast_to(np.asarray(trend0, dtype=np.float64), shape).copy()
    s0 = np.asarray(seasonals0, dtype=np.float64)
    m = s0.shape[-1]
    season = [np.broadcast_to(s0[..., i], shape).copy() for i in range(m)]
    n = len(y)
    L = np.empty((n,) + shape)
    Bt = np.empty((n,) + shape)
    S = np.empty((n,) + shape)
    F = np.empty((n,) + shape)
    for t in range(n):
        s_old = season[t % m]
        F[t] = (l + b) * s_old
        l_new = alpha * y[t] / s_old + (1 - alpha) * (l + b)
        b = beta * (l_new - l) + (1 - beta) * b
        l = l_new
        s_new = gamma * y[t] / l + (1 - gamma) * s_old
        season[t % m] = s_new
        L[t], Bt[t], S[t] = l, b, s_new
    return Recursion(L, Bt, S, F)


def _initial_state(y: np.ndarray, m: int):
    first, second = y[:m].mean(), y[m:2 * m].mean()
    return first, (second - first) / m, y[:m] / first


def holt_winters_fit(history, params: Optional[Tuple[float, float, float]] = None,
                     period: int = PERIOD) -> HoltWintersState:
    """Fit on ``history``; without ``params`` the grid GRID**3 is searched for the lowest one-step MAE.

    The first cycle initialises the state and the recursion runs over the
    remaining observations. Ties in MAE go to the first grid point in
    (alpha, beta, gamma) lexicographic order.
    """
    y = _check(history, 2 * period, "Holt-Winters")
    l0, b0, s0 = _initial_state(y, period)
    rest = y[period:]
    if params is None:
        grid = np.array(list(itertools.product(GRID, GRID, GRID)))
        a, bb, g = grid.T
    else:
        a, bb, g = (np.array([v]) for v in params)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        rec = holt_winters_recursion(rest, l0, b0, s0, a, bb, g)
        mae = np.mean(np.abs(rec.one_step - rest[:, None]), axis=0)
    mae = np.where(np.isfinite(mae), mae, np.inf)
    i = int(np.argmin(mae))
    n = len(rest)
    # factors in force for the next m steps: the latest update of each phase
    seasonals = tuple(float(rec.seasonal[t, i]) for t in range(n - period, n))
    return HoltWintersState(float(rec.level[-1, i]), float(rec.trend[-1, i]), seasonals,
                            float(a[i]), float(bb[i]), float(g[i]))


def _floor(f: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(f, FLOOR_FRACTION * float(np.min(y)))


def holt_winters_fit_forecast(history, horizon: int, params=None, period: int = PERIOD) -> np.ndarray:
    y = _check(history, 2 * period, "Holt-Winters")
    state = holt_winters_fit(y, params, period)
    return _floor(state.forecast(horizon), y)


# --- dispatch -------------------------------------------------------------------

TIER_COMBINED = "holt_winters+seasonal_naive"
TIER_NAIVE = "seasonal_naive"
TIER_LAST = "last_value"


def dispatch_tier(n_observed: int, full: int = 8, naive: int = 4) -> Optional[str]:
    if n_observed >= full:
        return TIER_COMBINED
    if n_observed >= naive:
        return TIER_NAIVE
    if n_observed >= 1:
        return TIER_LAST
    return None


def forecast_history(history, horizon: int, full: int = 8, naive: int = 4) -> Tuple[str, np.ndarray]:
    y = np.asarray(history, dtype=np.float64)
    tier = dispatch_tier(len(y), full, naive)
    if tier == TIER_COMBINED:
        f = 0.5 * (holt_winters_fit_forecast(y, horizon) + seasonal_naive(y, horizon))
    elif tier == TIER_NAIVE:
        f = seasonal_naive(y, horizon)
    elif tier == TIER_LAST:
        f = np.full(horizon, y[-1])
    else:
        raise BaselineError("empty history")
    return tier, f


class BaselineResult(NamedTuple):
    forecasts: Dict[DatarowKey, np.ndarray]
    tiers: Dict[DatarowKey, str]
    skipped: Tuple[DatarowKey, ...]


def baseline_forecast(panel: PanelDataset, horizon: Optional[int] = None, train_end: Optional[int] = None,
                      full: int = 8, naive: int = 4) -> BaselineResult:
    """Forecast quarters ``train_end ..`` for every row whose history reaches ``train_end``."""
    horizon = panel.horizon if horizon is None else horizon
    te = panel.train_end if train_end is None else train_end
    if not full > naive >= 1:
        raise BaselineError("need full > naive >= 1")
    out, tiers, skipped = {}, {}, []
    for row in panel.rows:
        hist = row.history(te)
        if len(hist) == 0 or row.first_quarter + len(hist) != te:
            skipped.append(row.key)
            continue
        tiers[row.key], out[row.key] = forecast_history(hist, horizon, full, naive)
    if skipped:
        logger.warning("baseline skipped %d row(s) without history up to quarter %d", len(skipped), te)
    return BaselineResult(out, tiers, tuple(skipped))
