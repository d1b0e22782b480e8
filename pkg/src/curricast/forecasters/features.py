from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..panel_data import DatarowKey, PanelDataset


@dataclass(frozen=True)
class FeatureEncoding:
    segment_index: int
    region_index: int
    product_index: int
    one_hot: np.ndarray


class FeatureEncoder:
    """One-hot indicators over the segment, region and product vocabularies."""

    def __init__(self, segments: Sequence[str], regions: Sequence[str], products: Sequence[str]):
        self.segments = list(segments)
        self.regions = list(regions)
        self.products = list(products)
        self._seg = {s: i for i, s in enumerate(self.segments)}
        self._reg = {r: i for i, r in enumerate(self.regions)}
        self._prod = {p: i for i, p in enumerate(self.products)}

    @classmethod
    def from_panel(cls, panel: PanelDataset) -> "FeatureEncoder":
        return cls(*panel.vocabularies())

    @property
    def size(self) -> int:
        return len(self.segments) + len(self.regions) + len(self.products)

    def encode(self, key: DatarowKey) -> FeatureEncoding:
        try:
            si, ri, pi = self._seg[key.segment], self._reg[key.region], self._prod[key.product]
        except KeyError as exc:
            raise KeyError(f"label {exc.args[0]!r} of {key.label()} is not in the vocabulary") from None
        v = np.zeros(self.size)
        v[si] = 1.0
        v[len(self.segments) + ri] = 1.0
        v[len(self.segments) + len(self.regions) + pi] = 1.0
        return FeatureEncoding(si, ri, pi, v)

    def matrix(self, keys: Sequence[DatarowKey]) -> np.ndarray:
        if not keys:
            return np.zeros((0, self.size))
        return np.stack([self.encode(k).one_hot for k in keys])

    def to_dict(self) -> dict:
        return {"segments": self.segments, "regions": self.regions, "products": self.products}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureEncoder":
        return cls(d["segments"], d["regions"], d["products"])
