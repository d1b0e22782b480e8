import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from curricast.panel_data import Datarow, DatarowKey, PanelDataset, SyntheticSpec, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def reference_panel():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def small_panel():
    # 3 x 2 x 2 hierarchy, a couple of short rows
    return generate_synthetic(SyntheticSpec(n_segments=3, n_regions=2, n_products=2, seed=5,
                                            short_history_fraction=0.2, presence=1.0))


def make_panel(series_by_key, first=None, horizon=4, n_quarters=None):
    """Panel from {(seg, reg, prod): values}; ``first`` maps keys to start quarters."""
    first = first or {}
    rows = [Datarow(DatarowKey(*k), first.get(k, 0), np.asarray(v, dtype=float)) for k, v in series_by_key.items()]
    n = n_quarters or max(r.end_quarter for r in rows)
    return PanelDataset(tuple(rows), horizon=horizon, n_quarters=n)


# --- acceptance reporting --------------------------------------------------------

_ACCEPTANCE = []


@pytest.fixture
def accept():
    """Record one acceptance line; the test still asserts on its own."""
    def record(name, ok, detail=""):
        _ACCEPTANCE.append((name, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
