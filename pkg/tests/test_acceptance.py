"""One test per acceptance criterion; each records a PASS/FAIL line shown in the
terminal summary. The desk benchmark trains 50 models and dominates the runtime."""

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from curricast import training as tr
from curricast.cli import main as cli_main
from curricast.curriculum import build_plan, score_datarows, stage_training_set
from curricast.evaluation import aggregate_level, evaluate, improvement, mape
from curricast.evaluation import test_actuals as actuals_for
from curricast.forecasters import DcnnForecasterConfig, init_dcnn
from curricast.forecasters import dcnn as dc
from curricast.panel_data import Datarow, DatarowKey, SyntheticSpec, generate_synthetic
from curricast.preprocess import forward_transform, inverse_transform, stl_decompose
from conftest import make_panel
from gradcheck import check_conv, check_dense, check_lstm_cell
from oracles import mape_brute

KEY = DatarowKey("s", "r", "p")


def test_gradient_suite(accept):
    t0 = time.perf_counter()
    worst = {name: max(fn(seed) for seed in range(25))
             for name, fn in [("dense", check_dense), ("lstm_cell", check_lstm_cell), ("dilated_conv", check_conv)]}
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    accept("gradient suite", ok, ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
           + f" over 25 configs each, {elapsed:.1f}s")
    assert ok


def test_stl_suite(accept):
    panel = generate_synthetic(SyntheticSpec(n_segments=5, n_regions=5, n_products=4, presence=1.0, seed=3,
                                             short_history_fraction=0.0))
    recon = 0.0
    for mode in ("periodic", "loess"):
        for r in panel.rows[:100]:
            d = stl_decompose(r, panel.train_end, mode=mode)
            recon = max(recon, float(np.max(np.abs(d.trend * d.seasonal * d.residual / r.history(35) - 1))))
    s = np.array([0.8, 1.1, 0.9, 1.25 / 0.792])
    s = s / np.exp(np.mean(np.log(s)))
    y = 10.0 * s[np.arange(32) % 4]
    d = stl_decompose(Datarow(KEY, 0, y), 32)
    recovery = float(np.max(np.abs(d.seasonal[:4] / s - 1)))
    gm = 0.0
    for r in panel.rows[:100]:
        S = stl_decompose(r, panel.train_end).seasonal
        gm = max(gm, abs(float(np.exp(np.mean(np.log(S[:4])))) - 1))
    ok = recon < 1e-8 and recovery < 1e-3 and gm < 1e-8
    accept("STL suite", ok, f"reconstruction {recon:.1e} (100 rows x 2 modes), "
                            f"factor recovery {recovery:.1e}, periodic geometric mean {gm:.1e}")
    assert ok


def test_transform_round_trip(accept):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = np.exp(rng.normal(0, 3, n)) * 10 ** rng.uniform(-3, 9)
        te = int(rng.integers(1, n + 1))
        z, state = forward_transform(Datarow(KEY, 0, y), te)
        worst = max(worst, float(np.max(np.abs(inverse_transform(z, state) / y - 1))))
    ok = worst < 1e-12
    accept("transform round trip", ok, f"max relative error {worst:.1e} on 100 series")
    assert ok


def _plan_violations(scores, k):
    plan = build_plan(scores, k)
    flat = plan.keys
    bad = []
    if sorted(flat) != sorted(scores) or len(set(flat)) != len(flat):
        bad.append("partition")
    sizes = [len(b) for b in plan.batches]
    if len(sizes) != k or max(sizes) - min(sizes) > 1:
        bad.append("balance")
    for i in range(k - 1):
        if max(scores[x] for x in plan.batches[i]) > min(scores[x] for x in plan.batches[i + 1]):
            bad.append("sort")
    prev = frozenset()
    for s in range(1, k + 1):
        cur = stage_training_set(plan, s)
        if not prev < cur:
            bad.append("monotone")
        prev = cur
    if build_plan(dict(reversed(list(scores.items()))), k).batches != plan.batches:
        bad.append("determinism")
    return bad


def test_curriculum_invariants(accept):
    rng = np.random.default_rng(0)
    checked, bad = 0, []
    for n in range(1, 51):
        keys = [DatarowKey(f"s{i % 4}", f"r{i}", "p") for i in range(n)]
        for scores in ({k: float(v) for k, v in zip(keys, rng.uniform(0, 1, n))},
                       {k: float(v) for k, v in zip(keys, rng.integers(0, 3, n))}):
            for k in range(1, n + 1):
                bad += _plan_violations(scores, k)
                checked += 1
    # order invariance under a common revenue scale, through the real decomposition
    series = {(f"s{i % 3}", f"r{i}", "p"): np.exp(rng.normal(0, 0.2, 16)) * rng.uniform(1, 9) for i in range(50)}
    orders = []
    for c in (1.0, 1e-3, 7.5, 1e4):
        panel = make_panel({k: v * c for k, v in series.items()})
        sc = score_datarows({r.key: stl_decompose(r, 16) for r in panel.rows})
        orders.append(build_plan(sc, 5).batches)
    if any(o != orders[0] for o in orders):
        bad.append("scale invariance")
    ok = not bad
    accept("curriculum invariants", ok, f"{checked} plans on 1..50 rows, every k from 1 to |rows|; "
                                        f"scale invariance at 4 scales; violations: {sorted(set(bad)) or 'none'}")
    assert ok


def test_receptive_field(accept):
    cfg = DcnnForecasterConfig(n_layers=3, filters=3, head_size=8)
    state = init_dcnn(cfg, 5)
    for k in state.params:
        state.params[k] = np.abs(state.params[k]) + 0.01
    x = np.random.default_rng(0).uniform(0.5, 1.0, size=(1, 1, 30))
    base, _ = dc.forward(state.params, cfg, x)
    sensitive = []
    for lag in range(12):
        x2 = x.copy()
        x2[0, 0, 25 - lag] += 10.0
        sensitive.append(bool(dc.forward(state.params, cfg, x2)[0][0, 25] != base[0, 25]))
    boundary = sensitive == [lag <= 7 for lag in range(12)]
    full = DcnnForecasterConfig()
    structure = full.dilations == [2 ** l for l in range(10)] and full.receptive_field == 1024
    ok = boundary and structure
    accept("receptive field and causality", ok,
           f"3-layer output sees lags 0..{max(i for i, s in enumerate(sensitive) if s)}, insensitive from lag 8; "
           f"10-layer dilations {full.dilations[0]}..{full.dilations[-1]}, receptive field {full.receptive_field}")
    assert ok


class _Audit(tr.TrainingMonitor):
    def __init__(self):
        self.starts, self.ends, self.max_q, self.keys = {}, {}, -1, set()

    def on_window_start(self, w, state):
        self.starts[w] = {k: v.copy() for k, v in state.params.items()}

    def on_window_end(self, w, state):
        self.ends[w] = {k: v.copy() for k, v in state.params.items()}

    def on_update(self, window, stage, epoch, provenance):
        for key, _, last in provenance:
            self.max_q = max(self.max_q, last)
            self.keys.add(key)


def test_rolling_window(accept, reference_panel):
    cfg = tr.TrainingConfig(variant="lstm_curriculum", hidden_size=8, p=1, k=2, runs=1)
    prep = tr.prepare_panel(reference_panel, cfg)
    audit = _Audit()
    res = tr.train_single(prep, cfg, 0, audit)
    n_windows = len(tr.window_offsets(prep.train_end, cfg.window_size))
    warm = all(np.array_equal(audit.ends[w][k], audit.starts[w + 1][k])
               for w in range(n_windows - 1) for k in audit.ends[w])
    leak_free = audit.max_q < 35 and audit.keys <= set(prep.trainable)
    ok = res.ok and prep.train_end == 35 and n_windows == 21 and len(audit.starts) == 21 and warm and leak_free
    accept("rolling window", ok, f"{n_windows} windows, warm start bit-identical: {warm}, "
                                 f"latest training quarter index {audit.max_q} (< 35), "
                                 f"out-of-sample rows touched: {len(audit.keys - set(prep.trainable))}")
    assert ok


# --- desk benchmark -----------------------------------------------------------------

GROUPS = 5
RUNS = 5
DESK_VARIANTS = ("lstm_basic", "lstm_curriculum")


def _desk_job(job):
    prepared, variant, group, i = job
    cfg = tr.TrainingConfig(variant=variant, runs=RUNS, seed_base=RUNS * group)
    t0 = time.perf_counter()
    res = tr.train_single(prepared[variant], cfg, i)
    res.state = None
    return variant, group, res, time.perf_counter() - t0


def test_desk_benchmark(accept, reference_panel):
    t0 = time.perf_counter()
    prepared = {v: tr.prepare_panel(reference_panel, tr.TrainingConfig(variant=v)) for v in DESK_VARIANTS}
    jobs = [(prepared, v, g, i) for g in range(GROUPS) for v in DESK_VARIANTS for i in range(RUNS)]
    workers = os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_desk_job, jobs))
    else:
        done = [_desk_job(j) for j in jobs]
    wall = time.perf_counter() - t0
    results, durations = {}, []
    for v, g, res, secs in done:
        results.setdefault((v, g), []).append(res)
        durations.append(secs)
    world = {key: evaluate(tr.aggregate_runs(rs), reference_panel).world_mape for key, rs in results.items()}
    wins = [world[("lstm_curriculum", g)] < world[("lstm_basic", g)] for g in range(GROUPS)]
    cur_ok = all(world[("lstm_curriculum", g)] <= 10.0 for g in range(GROUPS))
    # on fewer than 8 cores, project an 8-core wall time from the measured per-job times
    projected = wall if workers >= 8 else max(sum(durations) / 8, max(durations))
    time_ok = projected < 30 * 60
    detail = "; ".join(f"group {g}: curriculum {world[('lstm_curriculum', g)]:.2f}% vs basic "
                       f"{world[('lstm_basic', g)]:.2f}%" for g in range(GROUPS))
    ok_mape = accept("desk benchmark: curriculum world MAPE <= 10%", cur_ok, detail)
    ok_wins = accept("desk benchmark: curriculum beats basic in >= 3 of 5 seed groups", sum(wins) >= 3,
                     f"{sum(wins)} of {GROUPS} groups")
    ok_time = accept("desk benchmark: runtime < 30 min on 8 cores", time_ok,
                     f"{wall / 60:.1f} min wall on {workers} core(s), "
                     + ("measured" if workers >= 8 else f"projected 8-core {projected / 60:.1f} min"))
    print(json.dumps({f"{v}/{g}": m for (v, g), m in sorted(world.items())}))
    assert ok_mape and ok_wins and ok_time


# --- reporting -------------------------------------------------------------------------

def test_compare_harness(accept, tmp_path):
    out = tmp_path / "cmp"
    code = cli_main(["compare", "--segments", "2", "--regions", "2", "--products", "2", "--runs", "1",
                     "--hidden", "4", "--epochs", "1", "--p", "1", "--k", "2", "--dcnn-epochs", "2",
                     "--out", str(out), "--log-level", "WARNING"])
    import csv
    with open(out / "compare_world.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    models = [r["model"] for r in rows]
    identity = all(abs(float(r["improvement_pct"]) - (float(r["baseline_world_mape"]) - float(r["world_mape"]))
                       / float(r["baseline_world_mape"]) * 100) < 1e-6 for r in rows)
    hand = abs(improvement(10.0, 7.3) - 27.0) < 1e-9 and abs(improvement(10.0, 7.0) - 30.0) < 1e-9
    ok = code == 0 and models == list(tr.VARIANTS) and identity and hand
    accept("compare harness", ok, f"{len(models)} variant rows against the classical baseline, "
                                  f"row identity holds: {identity}, 10 -> 7.3 gives "
                                  f"{improvement(10.0, 7.3):.1f}%, 10 -> 7.0 gives {improvement(10.0, 7.0):.1f}%")
    assert ok


def test_mape_oracle(accept):
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        a = rng.uniform(1, 1e4, n) * rng.choice([-1, 1], n)
        p = a * rng.uniform(0, 2, n)
        want = mape_brute(p, a)
        worst = max(worst, abs(mape(p, a) - want) / max(1.0, want))
    part = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        panel = make_panel({(f"s{s}", f"r{g}", f"p{q}"): r.uniform(1, 1e6, 12)
                            for s in range(4) for g in range(3) for q in range(2)}, n_quarters=12)
        act = actuals_for(panel)
        fc = {k: v * r.uniform(0.5, 1.5, 4) for k, v in act.items()}
        world = aggregate_level(fc, act, "world")["world"]
        for i in (0, 1):
            seg_sum = np.sum([g[i] for g in aggregate_level(fc, act, "segment").values()], axis=0)
            part = max(part, float(np.max(np.abs(seg_sum / world[i] - 1))))
    ok = worst <= 1e-12 and part <= 1e-9
    accept("MAPE oracle", ok, f"max deviation {worst:.1e} on 1000 instances, partition identity {part:.1e}")
    assert ok


def test_cli_determinism(accept, tmp_path, capsys):
    args = ["train", "--runs", "2", "--seed", "7", "--segments", "5", "--regions", "5", "--products", "2",
            "--p", "3", "--log-level", "WARNING"]
    codes = [cli_main(args + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
    same = (tmp_path / "a" / "forecasts.csv").read_bytes() == (tmp_path / "b" / "forecasts.csv").read_bytes()
    ok = codes == [0, 0] and same
    accept("determinism", ok, f"train --runs 2 --seed 7 twice, forecast files byte-identical: {same}")
    assert ok
