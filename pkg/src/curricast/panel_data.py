"""Hierarchical revenue panels: data model, CSV I/O, synthetic generator, eligibility split."""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

COLUMNS = ("segment", "region", "product", "quarter", "revenue")
_QUARTER_RE = re.compile(r"^\s*(\d{4})-Q([1-4])\s*$")


class PanelError(ValueError):
    pass


class PanelSchemaError(PanelError):
    pass


class DuplicateError(PanelError):
    pass


class PanelValidationError(PanelError):
    def __init__(self, message: str, problems: Sequence[str] = ()):
        self.problems = list(problems)
        detail = "; ".join(self.problems[:20])
        if len(self.problems) > 20:
            detail += f"; ... ({len(self.problems) - 20} more)"
        super().__init__(f"{message}: {detail}" if detail else message)


class DatarowKey(NamedTuple):
    segment: str
    region: str
    product: str

    def label(self) -> str:
        return f"{self.segment}/{self.region}/{self.product}"


@dataclass(frozen=True)
class Datarow:
    """One quarterly series, contiguous from ``first_quarter``."""

    key: DatarowKey
    first_quarter: int
    values: np.ndarray

    def __post_init__(self):
        if not all(self.key):
            raise PanelValidationError("empty key label", [repr(self.key)])
        if self.first_quarter < 0:
            raise PanelValidationError("negative quarter index", [self.key.label()])
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise PanelValidationError("row must hold a non-empty 1-d series", [self.key.label()])
        bad = np.flatnonzero(~(vals > 0))
        if bad.size:
            raise PanelValidationError(
                "non-positive revenue",
                [f"{self.key.label()} quarter {self.first_quarter + int(i)}: {vals[i]!r}" for i in bad],
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def end_quarter(self) -> int:
        """One past the last observed quarter."""
        return self.first_quarter + len(self.values)

    @property
    def quarters(self) -> np.ndarray:
        return np.arange(self.first_quarter, self.end_quarter)

    def n_observed_before(self, quarter: int) -> int:
        return max(0, min(quarter, self.end_quarter) - self.first_quarter)

    def history(self, end: int) -> np.ndarray:
        """Observed values for quarters < ``end``."""
        return self.values[: self.n_observed_before(end)]

    def window(self, start: int, stop: int) -> np.ndarray:
        if start < self.first_quarter or stop > self.end_quarter:
            raise IndexError(f"{self.key.label()}: quarters [{start}, {stop}) not fully observed")
        return self.values[start - self.first_quarter: stop - self.first_quarter]

    def covers(self, start: int, stop: int) -> bool:
        return self.first_quarter <= start and stop <= self.end_quarter


@dataclass(frozen=True)
class PanelDataset:
    rows: Tuple[Datarow, ...]
    horizon: int = 4
    n_quarters: int = 39
    epoch: Tuple[int, int] = (2009, 1)
    _index: Dict[DatarowKey, Datarow] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.horizon < self.n_quarters:
            raise PanelValidationError(f"need 0 < horizon < n_quarters, got {self.horizon}, {self.n_quarters}")
        rows = tuple(sorted(self.rows, key=lambda r: r.key))
        index: Dict[DatarowKey, Datarow] = {}
        problems = []
        for r in rows:
            if r.key in index:
                raise DuplicateError(f"duplicate datarow key {r.key.label()}")
            index[r.key] = r
            if r.end_quarter > self.n_quarters:
                problems.append(f"{r.key.label()} ends at quarter {r.end_quarter - 1} >= {self.n_quarters}")
        if problems:
            raise PanelValidationError("rows extend beyond n_quarters", problems)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_index", index)

    @property
    def train_end(self) -> int:
        """Number of training quarters; test quarters are ``train_end .. n_quarters - 1``."""
        return self.n_quarters - self.horizon

    @property
    def keys(self) -> List[DatarowKey]:
        return [r.key for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, key: DatarowKey) -> Datarow:
        return self._index[key]

    def __contains__(self, key) -> bool:
        return key in self._index

    def vocabularies(self) -> Tuple[List[str], List[str], List[str]]:
        return (sorted({k.segment for k in self._index}),
                sorted({k.region for k in self._index}),
                sorted({k.product for k in self._index}))

    def subset(self, keys: Iterable[DatarowKey]) -> "PanelDataset":
        return PanelDataset(tuple(self._index[k] for k in keys), self.horizon, self.n_quarters, self.epoch)

    def quarter_label(self, index: int) -> str:
        return quarter_label(index, self.epoch)


def quarter_label(index: int, epoch: Tuple[int, int] = (2009, 1)) -> str:
    n = epoch[0] * 4 + (epoch[1] - 1) + index
    return f"{n // 4}-Q{n % 4 + 1}"


def parse_quarter(label: str) -> Tuple[int, int]:
    m = _QUARTER_RE.match(label)
    if not m:
        raise PanelValidationError("bad quarter label", [repr(label)])
    return int(m.group(1)), int(m.group(2))


def _quarter_ordinal(yq: Tuple[int, int]) -> int:
    return yq[0] * 4 + yq[1] - 1


# --- CSV I/O ---------------------------------------------------------------

def _data_lines(text: str) -> List[str]:
    # '#' lines carry provenance headers
    return [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def read_panel_text(text: str, schema: Mapping[str, str] | None = None, *,
                    horizon: int = 4, n_quarters: int | None = None,
                    epoch: Tuple[int, int] | None = None) -> PanelDataset:
    """Parse a long-format panel CSV.

    ``n_quarters`` defaults to one past the last quarter in the file (at
    least ``horizon + 1``) and the epoch to its first quarter.
    """
    schema = {c: c for c in COLUMNS} | dict(schema or {})
    reader = csv.DictReader(io.StringIO("\n".join(_data_lines(text))))
    header = reader.fieldnames or []
    missing = [c for c in COLUMNS if schema[c] not in header]
    if missing:
        raise PanelSchemaError(f"missing column(s): {', '.join(schema[c] for c in missing)}")

    records: Dict[DatarowKey, Dict[int, float]] = {}
    problems: List[str] = []
    parsed = []
    for lineno, rec in enumerate(reader, start=2):
        key = DatarowKey(rec[schema["segment"]].strip(), rec[schema["region"]].strip(),
                         rec[schema["product"]].strip())
        if not all(key):
            problems.append(f"line {lineno}: empty key label")
            continue
        yq = parse_quarter(rec[schema["quarter"]])
        try:
            revenue = float(rec[schema["revenue"]])
        except ValueError:
            problems.append(f"line {lineno}: revenue {rec[schema['revenue']]!r} is not a number")
            continue
        if not revenue > 0 or not np.isfinite(revenue):
            problems.append(f"line {lineno} ({key.label()} {rec[schema['quarter']].strip()}): revenue {revenue!r}")
            continue
        parsed.append((lineno, key, yq, revenue))
    if problems:
        raise PanelValidationError("invalid revenue rows", problems)
    if not parsed:
        raise PanelValidationError("panel has no data rows")

    base = _quarter_ordinal(epoch) if epoch else min(_quarter_ordinal(p[2]) for p in parsed)
    for lineno, key, yq, revenue in parsed:
        q = _quarter_ordinal(yq) - base
        if q < 0:
            problems.append(f"line {lineno}: quarter before epoch")
            continue
        series = records.setdefault(key, {})
        if q in series:
            raise DuplicateError(f"duplicate (key, quarter): {key.label()} {quarter_label(q, _from_ordinal(base))} (line {lineno})")
        series[q] = revenue
    if problems:
        raise PanelValidationError("invalid quarter labels", problems)

    rows = []
    for key, series in records.items():
        qs = sorted(series)
        first = qs[0]
        if qs[-1] - first + 1 != len(qs):
            gaps = sorted(set(range(first, qs[-1] + 1)) - set(qs))
            problems.append(f"{key.label()}: missing interior quarters {gaps}")
            continue
        rows.append(Datarow(key, first, np.array([series[q] for q in qs])))
    if problems:
        raise PanelValidationError("non-contiguous rows", problems)
    if n_quarters is None:
        n_quarters = max(max(r.end_quarter for r in rows), horizon + 1)
    return PanelDataset(tuple(rows), horizon=horizon, n_quarters=n_quarters, epoch=_from_ordinal(base))


def _from_ordinal(n: int) -> Tuple[int, int]:
    return n // 4, n % 4 + 1


def load_panel(path: str | Path, schema: Mapping[str, str] | None = None, **kwargs) -> PanelDataset:
    return read_panel_text(Path(path).read_text(), schema, **kwargs)


def panel_to_csv(panel: PanelDataset, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in panel.rows:
        for q, v in zip(row.quarters, row.values):
            w.writerow([*row.key, panel.quarter_label(int(q)), repr(float(v))])
    return buf.getvalue()


def save_panel(panel: PanelDataset, path: str | Path, header_comment: str | None = None) -> None:
    Path(path).write_text(panel_to_csv(panel, header_comment))


# --- synthetic generator ---------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_segments: int = 8
    n_regions: int = 6
    n_products: int = 4
    seed: int = 1
    seasonal_amplitude: float = 0.15
    growth_range: Tuple[float, float] = (0.99, 1.03)
    noise_sigma: float = 0.05
    short_history_fraction: float = 0.16
    base_revenue_range: Tuple[float, float] = (1e6, 1e8)
    presence: float = 0.9
    min_history: int = 15
    n_quarters: int = 39
    horizon: int = 4

    def __post_init__(self):
        object.__setattr__(self, "growth_range", tuple(float(x) for x in self.growth_range))
        object.__setattr__(self, "base_revenue_range", tuple(float(x) for x in self.base_revenue_range))
        errs = []
        for name in ("n_segments", "n_regions", "n_products"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        for name in ("short_history_fraction", "presence"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in [0, 1]")
        if self.presence == 0.0:
            errs.append("presence must be > 0")
        for name in ("seasonal_amplitude", "noise_sigma"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0")
        g0, g1 = self.growth_range
        if not 0 < g0 <= g1:
            errs.append("growth_range must be a positive, ordered interval")
        b0, b1 = self.base_revenue_range
        if not 0 < b0 <= b1:
            errs.append("base_revenue_range must be a positive, ordered interval")
        if not 0 < self.horizon < self.n_quarters:
            errs.append("need 0 < horizon < n_quarters")
        if not 2 <= self.min_history <= self.n_quarters - self.horizon:
            errs.append("min_history must lie in [2, n_quarters - horizon]")
        if not 0 <= self.seed < 2 ** 64:
            errs.append("seed must be a 64-bit unsigned integer")
        if errs:
            raise PanelValidationError("invalid synthetic spec", errs)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise PanelValidationError("unknown synthetic spec field(s)", unknown)
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(prefix: str, n: int) -> List[str]:
    width = max(2, len(str(n)))
    return [f"{prefix}{i + 1:0{width}d}" for i in range(n)]


def generate_synthetic(spec: SyntheticSpec) -> PanelDataset:
    """Seeded multiplicative panel.

    revenue = base(segment) x region share x product share x seasonal(quarter of year)
    x growth ** t x lognormal noise. A ``short_history_fraction`` of rows start
    late so that fewer than ``min_history`` quarters precede the test period.
    """
    rng = np.random.default_rng(spec.seed)
    segments = _labels("S", spec.n_segments)
    regions = _labels("R", spec.n_regions)
    products = _labels("P", spec.n_products)
    T = spec.n_quarters
    train_end = T - spec.horizon
    t = np.arange(T)

    lo, hi = np.log(spec.base_revenue_range)
    seg_base = np.exp(rng.uniform(lo, hi, spec.n_segments))
    seg_pattern = rng.normal(size=(spec.n_segments, 4))
    region_share = rng.dirichlet(np.full(spec.n_regions, 2.0), size=spec.n_segments)
    product_share = rng.dirichlet(np.full(spec.n_products, 2.0), size=spec.n_segments)

    keys = []
    draws = []
    for si, seg in enumerate(segments):
        for ri, reg in enumerate(regions):
            for pi, prod in enumerate(products):
                present = rng.random() < spec.presence
                jitter = rng.normal(scale=0.25, size=4)
                growth = rng.uniform(*spec.growth_range)
                noise = rng.normal(size=T)
                if present:
                    keys.append(DatarowKey(seg, reg, prod))
                    draws.append((si, ri, pi, jitter, growth, noise))

    n_short = int(round(spec.short_history_fraction * len(keys)))
    short_idx = set(rng.permutation(len(keys))[:n_short].tolist())
    short_len = rng.integers(2, spec.min_history, size=len(keys))

    rows = []
    for idx, (key, (si, ri, pi, jitter, growth, noise)) in enumerate(zip(keys, draws)):
        pattern = seg_pattern[si] + jitter
        pattern = pattern - pattern.mean()
        scale = np.abs(pattern).max()
        log_season = spec.seasonal_amplitude * (pattern / scale if scale > 0 else pattern)
        level = seg_base[si] * region_share[si, ri] * product_share[si, pi]
        log_rev = (np.log(level) + log_season[t % 4] + t * np.log(growth)
                   + spec.noise_sigma * noise)
        first = train_end - int(short_len[idx]) if idx in short_idx else 0
        rows.append(Datarow(key, first, np.exp(log_rev[first:])))
    return PanelDataset(tuple(rows), horizon=spec.horizon, n_quarters=T)


# --- eligibility ------------------------------------------------------------

@dataclass(frozen=True)
class EligibilitySplit:
    trainable: frozenset
    out_of_sample: frozenset
    min_history: int

    @property
    def trainable_fraction(self) -> float:
        n = len(self.trainable) + len(self.out_of_sample)
        return len(self.trainable) / n if n else 0.0


def split_eligibility(panel: PanelDataset, min_history: int = 15,
                      train_end: int | None = None) -> EligibilitySplit:
    """Rows with >= ``min_history`` contiguous quarters ending at the last training quarter are trainable."""
    if min_history < 1:
        raise ValueError("min_history must be >= 1")
    end = panel.train_end if train_end is None else train_end
    trainable, oos = set(), set()
    for row in panel.rows:
        ok = row.first_quarter <= end - min_history and row.end_quarter >= end
        (trainable if ok else oos).add(row.key)
    return EligibilitySplit(frozenset(trainable), frozenset(oos), min_history)
