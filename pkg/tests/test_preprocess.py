import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from curricast.panel_data import Datarow, DatarowKey, SyntheticSpec, generate_synthetic
from curricast.preprocess import (Decomposition, DomainError, InsufficientHistoryError, TransformState,
                                  decompositions_to_csv, default_trend_span, deseasonalize, forward_transform,
                                  inverse_transform, reseasonalize, residual_score, stl_decompose)

KEY = DatarowKey("s", "r", "p")
positive_series = st.lists(st.floats(1e-3, 1e9), min_size=2, max_size=40)


def row(values, first=0):
    return Datarow(KEY, first, np.asarray(values, dtype=float))


def known_seasonal(n=32, level=10.0):
    s = np.array([0.8, 1.1, 0.9, 1.25 / 0.792])
    s = s / np.exp(np.mean(np.log(s)))
    return level * s[np.arange(n) % 4], s


# --- transforms -----------------------------------------------------------------

def test_constant_e_squared():
    out, st_ = forward_transform(np.full(6, math.e ** 2), 4)
    assert np.allclose(out, 0, atol=1e-15)
    assert st_.log_mean == pytest.approx(2.0)


def test_hand_example():
    # train_end is exclusive here: quarters 0..2 are training quarters
    out, st_ = forward_transform(np.array([1.0, math.e, math.e ** 2]), 3)
    assert st_.log_mean == pytest.approx(1.0)
    assert np.allclose(out, [-1, 0, 1])
    assert np.allclose(inverse_transform([-1, 0, 1], TransformState(None, 1.0)), [1, math.e, math.e ** 2])


def test_log_mean_ignores_test_quarters():
    a, sa = forward_transform(np.array([1.0, 2.0, 3.0, 1e6]), 3)
    b, sb = forward_transform(np.array([1.0, 2.0, 3.0, 5.0]), 3)
    assert sa.log_mean == sb.log_mean


def test_zero_is_domain_error():
    with pytest.raises(DomainError):
        forward_transform(np.array([1.0, 0.0, 2.0]), 3)


def test_inverse_of_zeros():
    assert np.allclose(inverse_transform(np.zeros(3), TransformState(None, 2.0)), math.e ** 2)


@given(positive_series)
def test_round_trip(values):
    v = np.array(values)
    out, s = forward_transform(v, len(v))
    assert np.max(np.abs(inverse_transform(out, s) / v - 1)) < 1e-12


# --- STL --------------------------------------------------------------------------

def test_trend_span_formula():
    # smallest odd integer >= 1.5 * 4 / (1 - 1.5 / 7)
    assert default_trend_span(4, 7) == 9


def test_known_factor_recovery():
    y, s = known_seasonal()
    d = stl_decompose(row(y), 32)
    assert np.max(np.abs(d.seasonal[:4] / s - 1)) < 1e-3
    assert np.max(np.abs(d.residual - 1)) < 1e-3


def test_known_factor_recovery_loess_mode():
    y, s = known_seasonal()
    d = stl_decompose(row(y), 32, mode="loess")
    assert np.max(np.abs(d.seasonal[4:8] / s - 1)) < 1e-3
    assert np.max(np.abs(d.residual - 1)) < 1e-3


def test_phase_is_calendar_aligned():
    y, s = known_seasonal(34)
    d = stl_decompose(row(y[2:], first=2), 34)
    assert np.max(np.abs(d.seasonal_at([4, 5, 6, 7]) / s - 1)) < 1e-3


def test_constant_series():
    d = stl_decompose(row(np.full(20, 7.0)), 20)
    assert np.allclose(d.seasonal, 1, atol=1e-6)
    assert np.allclose(d.residual, 1, atol=1e-6)
    assert np.allclose(d.trend, 7.0, rtol=1e-6)


def test_too_short():
    with pytest.raises(InsufficientHistoryError):
        stl_decompose(row(np.ones(5)), 5)


def test_train_end_limits_fit():
    y = np.exp(np.random.default_rng(0).normal(size=30))
    d = stl_decompose(row(y), 20)
    assert len(d.log_trend) == 20


@pytest.mark.parametrize("mode", ["periodic", "loess"])
def test_reconstruction_on_random_rows(mode):
    panel = generate_synthetic(SyntheticSpec(n_segments=5, n_regions=5, n_products=4, presence=1.0, seed=3,
                                             short_history_fraction=0.0))
    for r in panel.rows[:100]:
        d = stl_decompose(r, panel.train_end, mode=mode)
        hist = r.history(panel.train_end)
        assert np.max(np.abs(d.trend * d.seasonal * d.residual / hist - 1)) < 1e-8


def test_periodic_seasonals_repeat_with_unit_geometric_mean():
    y = np.exp(np.random.default_rng(1).normal(size=35))
    d = stl_decompose(row(y), 35)
    S = d.seasonal
    assert np.array_equal(S[4:], S[:-4])
    assert abs(np.exp(np.mean(np.log(S[:4]))) - 1) < 1e-8


def test_seasonal_extension_repeats_last_cycle():
    y = np.exp(np.random.default_rng(2).normal(size=35))
    d = stl_decompose(row(y), 35, mode="loess")
    assert np.allclose(d.seasonal_at(np.arange(35, 43)), np.tile(d.seasonal[31:35], 2))


# --- seasonal adjustment -------------------------------------------------------------

def _decomp(S, n=8, first=0):
    return Decomposition(KEY, first, np.zeros(n), np.log(np.resize(S, n)), np.zeros(n))


def test_deseasonalize_identity_when_flat():
    r = row([1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(deseasonalize(r, _decomp([1, 1, 1, 1], 4)).values, r.values)


def test_deseasonalize_arithmetic():
    out = deseasonalize(row([100.0, 100.0, 100.0, 100.0]), _decomp([1.25, 1, 1, 1], 4))
    assert out.values[0] == pytest.approx(80.0)


def test_reseasonalize_arithmetic():
    d = _decomp([1.25, 0.8, 1.0, 1.1], 8)
    assert reseasonalize([80.0], d, 8)[0] == pytest.approx(100.0)
    f = np.array([10.0, 20.0, 30.0, 40.0])
    assert np.allclose(reseasonalize(f, d, 8), [12.5, 16.0, 30.0, 44.0])


def test_reseasonalize_identity_when_flat():
    assert np.allclose(reseasonalize([1.0, 2.0], _decomp([1, 1, 1, 1]), 8), [1.0, 2.0])


def test_reseasonalize_needs_prior_year():
    with pytest.raises(InsufficientHistoryError):
        reseasonalize([1.0], _decomp([1, 1, 1, 1], 4, first=4), 6)


@given(st.lists(st.floats(1e-2, 1e6), min_size=12, max_size=30))
def test_deseasonalize_then_reseasonalize(values):
    r = row(values)
    d = stl_decompose(r, len(values))
    adj = deseasonalize(r, d)
    # quarters 4.. reseasonalised with the factor a year earlier (same phase in periodic mode)
    back = reseasonalize(adj.values[4:], d, 4)
    assert np.max(np.abs(back / r.values[4:] - 1)) < 1e-10


# --- residual score -------------------------------------------------------------------

def test_score_zero_for_exact_fit():
    assert residual_score(_decomp([1, 1, 1, 1])) == 0.0


def test_score_hand_example():
    d = Decomposition(KEY, 0, np.zeros(4), np.zeros(4), np.log([1.1, 0.9, 1.1, 0.9]))
    assert residual_score(d) == pytest.approx(0.1, rel=1e-12)


def test_noisier_twin_scores_higher():
    clean = generate_synthetic(SyntheticSpec(n_segments=1, n_regions=2, n_products=2, noise_sigma=0.01, seed=4))
    noisy = generate_synthetic(SyntheticSpec(n_segments=1, n_regions=2, n_products=2, noise_sigma=0.1, seed=4))
    for a, b in zip(clean.rows, noisy.rows):
        assert residual_score(stl_decompose(b, 35)) > residual_score(stl_decompose(a, 35))


@given(st.lists(st.floats(1e-2, 1e6), min_size=8, max_size=35), st.floats(1e-3, 1e3))
def test_score_scale_invariant(values, c):
    r = row(values)
    scaled = row(np.array(values) * c)
    assert abs(residual_score(stl_decompose(r, len(values))) -
               residual_score(stl_decompose(scaled, len(values)))) < 1e-9


def test_decomposition_csv():
    y, _ = known_seasonal(8)
    text = decompositions_to_csv([stl_decompose(row(y), 8)])
    lines = text.splitlines()
    assert lines[0] == "segment,region,product,quarter,trend,seasonal,residual"
    assert len(lines) == 9
