"""Confusion counts and the DSC / SE / SP / ACC metric set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _ratio(num: int, den: int) -> float:
    # empty class: nothing to miss, scores 1
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class MetricsRecord:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_masks(cls, pred: np.ndarray, truth: np.ndarray) -> "MetricsRecord":
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction {pred.shape} vs mask {truth.shape}")
        tp = int(np.count_nonzero(pred & truth))
        fp = int(np.count_nonzero(pred & ~truth))
        fn = int(np.count_nonzero(~pred & truth))
        return cls(tp, fp, pred.size - tp - fp - fn, fn)

    def __add__(self, other: "MetricsRecord") -> "MetricsRecord":
        return MetricsRecord(self.tp + other.tp, self.fp + other.fp,
                             self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def dsc(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def se(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def sp(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def acc(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    def as_row(self) -> dict:
        return {"dsc": self.dsc, "se": self.se, "sp": self.sp, "acc": self.acc,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}
