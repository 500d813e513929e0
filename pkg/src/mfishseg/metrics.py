"""Correct-classification-ratio accounting, confusion matrices and the
train-image x test-image CCR matrix."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import LabelCoding


@dataclass
class CcrReport:
    """Pixel accounting over ground-truth chromosome pixels only."""

    correct: int
    total: int
    per_class: Dict[int, Tuple[int, int]] = field(default_factory=dict)

    @property
    def ccr(self) -> float:
        return self.correct / self.total

    def merge(self, other: "CcrReport") -> "CcrReport":
        per_class = dict(self.per_class)
        for code, (c, t) in other.per_class.items():
            pc, pt = per_class.get(code, (0, 0))
            per_class[code] = (pc + c, pt + t)
        return CcrReport(correct=self.correct + other.correct,
                         total=self.total + other.total, per_class=per_class)

    def to_json(self) -> str:
        return json.dumps({
            "correct": self.correct, "total": self.total, "ccr": self.ccr,
            "per_class": {str(k): list(v) for k, v in self.per_class.items()},
        })


def compute_ccr(pred: np.ndarray, truth: np.ndarray,
                coding: Optional[LabelCoding] = None) -> CcrReport:
    """Fraction of ground-truth chromosome pixels predicted with the right
    class; background and overlap pixels are never counted."""
    coding = coding or LabelCoding()
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    per_class = {}
    correct = 0
    total = 0
    for code in coding.chromosome_codes:
        sel = truth == code
        t = int(sel.sum())
        if t == 0:
            continue
        c = int((pred[sel] == code).sum())
        per_class[code] = (c, t)
        correct += c
        total += t
    if total == 0:
        raise ValueError("no chromosome pixels in ground truth")
    return CcrReport(correct=correct, total=total, per_class=per_class)


def confusion(pred: np.ndarray, truth: np.ndarray,
              coding: Optional[LabelCoding] = None) -> np.ndarray:
    """24x24 counts over chromosome pixels; rows are truth classes, columns
    predicted classes. Predictions outside the 24 codes are dropped."""
    coding = coding or LabelCoding()
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    codes = np.asarray(coding.chromosome_codes)
    n = len(codes)
    lookup = np.full(int(max(codes.max(), pred.max(), truth.max())) + 1, -1)
    lookup[codes] = np.arange(n)
    sel = np.isin(truth, codes)
    if not sel.any():
        raise ValueError("no chromosome pixels in ground truth")
    ti = lookup[truth[sel].ravel()]
    pi = lookup[pred[sel].ravel()]
    keep = pi >= 0
    mat = np.zeros((n, n), dtype=np.int64)
    np.add.at(mat, (ti[keep], pi[keep]), 1)
    return mat


def average_last_k(values: Sequence[float], k: int) -> float:
    if len(values) < k:
        raise ValueError(f"need at least {k} values, got {len(values)}")
    if k < 1:
        raise ValueError("k must be positive")
    return float(np.mean(values[-k:]))


@dataclass
class ErrorMatrix:
    """CCR of a classifier built from sample i (row) tested on sample j
    (column)."""

    ids: List[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise ValueError(f"values must be {n}x{n}, got {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("CCR entries must lie in [0, 1]")

    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.values)))

    def off_diagonal_mean(self) -> float:
        n = len(self.ids)
        off = ~np.eye(n, dtype=bool)
        return float(self.values[off].mean())

    def diagonal_maximal_rate(self) -> float:
        """Fraction of test columns whose best training image is itself."""
        best = self.values.argmax(axis=0)
        return float(np.mean(best == np.arange(len(self.ids))))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["train\\test"] + self.ids)
            for i, row_id in enumerate(self.ids):
                writer.writerow([row_id] + [repr(float(v)) for v in self.values[i]])

    @classmethod
    def from_csv(cls, path) -> "ErrorMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        ids = rows[0][1:]
        values = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        return cls(ids=ids, values=values)
