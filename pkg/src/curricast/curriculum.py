"""Baby Steps curriculum: score rows by STL residual error, sort, cut into k
batches, and grow the training set one batch per stage."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from .nn import XorShift64Star
from .panel_data import DatarowKey, PanelDataset
from .preprocess import Decomposition, residual_score

Weighting = Literal["uniform", "segment_revenue", "segment_revenue_raw"]
Ordering = Literal["ascending", "descending"]
Grouping = Literal["uniform", "by_segment"]


class CurriculumError(ValueError):
    pass


def segment_training_revenue(panel: PanelDataset, keys: Sequence[DatarowKey] | None = None) -> Dict[str, float]:
    keys = panel.keys if keys is None else keys
    out: Dict[str, float] = {}
    for k in keys:
        out[k.segment] = out.get(k.segment, 0.0) + float(panel[k].history(panel.train_end).sum())
    return out


def score_datarows(decomps: Mapping[DatarowKey, Decomposition], weighting: Weighting = "uniform",
                   segment_revenue: Optional[Mapping[str, float]] = None,
                   keys: Optional[Sequence[DatarowKey]] = None) -> Dict[DatarowKey, float]:
    """Difficulty per row: residual score, optionally times the row's segment revenue.

    ``segment_revenue`` maps segment to training revenue. ``segment_revenue``
    weighting uses the segment's share of the total; ``segment_revenue_raw``
    uses the absolute amount.
    """
    keys = list(decomps) if keys is None else list(keys)
    missing = [k for k in keys if k not in decomps]
    if missing:
        raise CurriculumError(f"no decomposition for {len(missing)} row(s): "
                              + ", ".join(k.label() for k in missing[:10]))
    base = {k: residual_score(decomps[k]) for k in keys}
    if weighting == "uniform":
        return base
    if segment_revenue is None:
        raise CurriculumError(f"{weighting} weighting needs segment revenues")
    if weighting == "segment_revenue":
        total = sum(segment_revenue.values())
        return {k: s * segment_revenue[k.segment] / total for k, s in base.items()}
    if weighting == "segment_revenue_raw":
        return {k: s * segment_revenue[k.segment] for k, s in base.items()}
    raise CurriculumError(f"unknown weighting {weighting!r}")


@dataclass(frozen=True)
class CurriculumPlan:
    batches: Tuple[Tuple[DatarowKey, ...], ...]
    scores: Mapping[DatarowKey, float]
    ordering: Ordering = "ascending"
    grouping: Grouping = "uniform"
    epochs_per_stage: int = 75
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.batches)

    @property
    def keys(self) -> List[DatarowKey]:
        return [key for b in self.batches for key in b]

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k,
            "ordering": self.ordering,
            "grouping": self.grouping,
            "epochs_per_stage": self.epochs_per_stage,
            "seed": self.seed,
            "batches": [[list(key) for key in b] for b in self.batches],
            "scores": [[*key, self.scores[key]] for key in sorted(self.scores)],
        }, indent=1)


def build_plan(scores: Mapping[DatarowKey, float], k: int, ordering: Ordering = "ascending",
               grouping: Grouping = "uniform", p: int = 75, seed: int = 0, *,
               row_revenue: Optional[Mapping[DatarowKey, float]] = None) -> CurriculumPlan:
    """Sort rows by (score, key) and cut them into stages.

    ``uniform`` grouping makes k contiguous batches whose sizes differ by at
    most one. ``by_segment`` makes one batch per segment, ordered by the
    revenue-weighted mean score of its rows (``row_revenue`` gives the
    weights; equal weights if omitted), and ignores ``k``. ``descending``
    reverses the batch order.
    """
    if p < 1:
        raise CurriculumError("epochs per stage must be >= 1")
    keys = sorted(scores, key=lambda key: (scores[key], key))
    if grouping == "uniform":
        if not 1 <= k <= len(keys):
            raise CurriculumError(f"need 1 <= k <= {len(keys)} rows, got k={k}")
        batches = [tuple(keys[a:b]) for a, b in _cuts(len(keys), k)]
    elif grouping == "by_segment":
        if not keys:
            raise CurriculumError("no rows to schedule")
        groups: Dict[str, List[DatarowKey]] = {}
        for key in keys:
            groups.setdefault(key.segment, []).append(key)

        def seg_score(seg: str) -> float:
            rows = groups[seg]
            w = np.array([row_revenue[r] if row_revenue else 1.0 for r in rows])
            s = np.array([scores[r] for r in rows])
            return float(w @ s / w.sum())

        order = sorted(groups, key=lambda seg: (seg_score(seg), seg))
        batches = [tuple(groups[seg]) for seg in order]
    else:
        raise CurriculumError(f"unknown grouping {grouping!r}")
    if ordering == "descending":
        batches = batches[::-1]
    elif ordering != "ascending":
        raise CurriculumError(f"unknown ordering {ordering!r}")
    return CurriculumPlan(tuple(batches), dict(scores), ordering, grouping, p, seed)


def _cuts(n: int, k: int) -> List[Tuple[int, int]]:
    size, extra = divmod(n, k)
    out, start = [], 0
    for i in range(k):
        stop = start + size + (1 if i < extra else 0)
        out.append((start, stop))
        start = stop
    return out


def stage_training_set(plan: CurriculumPlan, stage: int) -> frozenset:
    """Union of batches 1..stage (1-based)."""
    if not 1 <= stage <= plan.k:
        raise CurriculumError(f"stage {stage} outside 1..{plan.k}")
    return frozenset(key for b in plan.batches[:stage] for key in b)


def stage_order(plan: CurriculumPlan, stage: int, rng: XorShift64Star) -> List[DatarowKey]:
    """The stage's rows in a fresh shuffled order; call once per epoch."""
    keys = sorted(stage_training_set(plan, stage))
    rng.shuffle(keys)
    return keys
