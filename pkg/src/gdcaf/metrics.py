"""Skill scores on thresholded rain masks, and the persistence baseline.

Confusion counts are pooled over every evaluated pixel before scores are
computed. A score whose denominator is zero is reported as 0 and its name is
listed in ``SkillReport.degenerate``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import ShapeError

RAIN_THRESHOLD_MM = 0.5
UNIT_TO_MM = {"m": 1e3, "mm": 1.0}
COLUMNS = ("mse", "accuracy", "precision", "recall", "f1", "csi", "far", "hss")


def binarize(maps: np.ndarray, threshold_mm_per_h: float = RAIN_THRESHOLD_MM, units: str = "m") -> np.ndarray:
    """Rain mask: pixel >= threshold (a pixel exactly at the threshold counts as rain)."""
    if threshold_mm_per_h <= 0:
        raise ValueError("threshold must be positive")
    return np.asarray(maps) >= threshold_mm_per_h / UNIT_TO_MM[units]


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def confusion(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    pred, target = np.asarray(pred, bool), np.asarray(target, bool)
    if pred.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    tp = int(np.count_nonzero(pred & target))
    fp = int(np.count_nonzero(pred & ~target))
    fn = int(np.count_nonzero(~pred & target))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


@dataclass
class SkillReport:
    mse: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    csi: float
    far: float
    hss: float
    degenerate: list[str] = field(default_factory=list)
    counts: ConfusionCounts | None = None

    def row(self) -> list[float]:
        return [getattr(self, c) for c in COLUMNS]

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.counts is None:
            d.pop("counts")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def skill(c: ConfusionCounts, mse: float) -> SkillReport:
    flags: list[str] = []
    tp, fp, tn, fn = c.tp, c.fp, c.tn, c.fn
    accuracy = _ratio(tp + tn, c.total, "accuracy", flags)
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    csi = _ratio(tp, tp + fp + fn, "csi", flags)
    far = _ratio(fp, tp + fp, "far", flags)
    # python ints: exact products even for very large pixel counts
    hss = _ratio(
        2 * (tp * tn) - 2 * (fp * fn),
        (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn),
        "hss",
        flags,
    )
    return SkillReport(float(mse), accuracy, precision, recall, f1, csi, far, hss, flags, c)


def persistence_predict(X: np.ndarray) -> np.ndarray:
    """Last observed frame per node: ``(..., N, T, H, W) -> (..., N, H, W)``."""
    X = np.asarray(X)
    if X.shape[-3] < 1:
        raise ValueError("need at least one input frame")
    return X[..., -1, :, :]


@dataclass
class _Accumulator:
    sse: float = 0.0
    n: int = 0
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)

    def add(self, pred: np.ndarray, target: np.ndarray, threshold_mm: float, units: str) -> None:
        d = pred.astype(np.float64) - target.astype(np.float64)
        self.sse += float(np.sum(d * d))
        self.n += d.size
        self.counts = self.counts + confusion(
            binarize(pred, threshold_mm, units), binarize(target, threshold_mm, units)
        )

    def report(self) -> SkillReport:
        if self.n == 0:
            raise ValueError("nothing was evaluated")
        return skill(self.counts, self.sse / self.n)


def evaluate(
    predict: Callable[[np.ndarray], np.ndarray],
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    restrict_to_region: int | None = None,
    threshold_mm_per_h: float = RAIN_THRESHOLD_MM,
    units: str = "m",
) -> SkillReport:
    """Pool squared error and confusion counts over ``(X, Y)`` batches.

    ``predict`` maps ``X`` of shape ``(B, N, T, H, W)`` to ``(B, N, H, W)`` in
    the same units as ``Y``. ``restrict_to_region`` is a node index; when
    given only that node's pixels are scored.
    """
    acc = _Accumulator()
    for X, Y in batches:
        pred = np.asarray(predict(X))
        if pred.shape != Y.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {Y.shape}")
        if restrict_to_region is not None:
            pred, Y = pred[:, restrict_to_region], Y[:, restrict_to_region]
        acc.add(pred, Y, threshold_mm_per_h, units)
    return acc.report()


def reports_to_csv(rows: list[tuple[dict, SkillReport]]) -> str:
    """One CSV line per report; leading key columns followed by the score columns."""
    keys = list(rows[0][0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + [c.upper() if c in ("mse", "csi", "far", "hss") else c.capitalize() for c in COLUMNS])
    for key, rep in rows:
        w.writerow([key[k] for k in keys] + [f"{v:.8g}" for v in rep.row()])
    return buf.getvalue()
