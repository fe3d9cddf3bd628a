"""Overlap metrics (DSC, IoU, sensitivity, specificity) and their aggregation.

Degenerate denominators resolve as: both masks empty -> DSC = IoU = SE = 1;
no negatives in the truth mask -> SP = 1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

METRICS = ("dsc", "iou", "se", "sp")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"confusion: prediction {pred.shape} vs truth {truth.shape}")
    for name, m in (("prediction", pred), ("truth", truth)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"confusion: {name} mask is not binary")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dsc(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def se(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def sp(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp
    return 1.0 if denom == 0 else c.tn / denom


@dataclass(frozen=True)
class ImageRecord:
    id: str
    fold: int | str
    cls: str
    dsc: float
    iou: float
    se: float
    sp: float

    @classmethod
    def from_masks(cls, sid: str, fold, label: str, pred: np.ndarray, truth: np.ndarray) -> ImageRecord:
        c = confusion(pred, truth)
        return cls(sid, fold, label, dsc(c), iou(c), se(c), sp(c))

    def value(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass(frozen=True)
class GroupStats:
    n: int
    mean: dict[str, float]
    std: dict[str, float]


@dataclass
class MetricsReport:
    records: list[ImageRecord]
    groups: dict[tuple[str, str], GroupStats] = field(default_factory=dict)

    def get(self, cls: str = "all", fold: str = "all") -> GroupStats | None:
        return self.groups.get((cls, str(fold)))

    def mean(self, metric: str = "dsc", cls: str = "all") -> float:
        g = self.get(cls)
        if g is None:
            raise KeyError(f"no records for class group {cls!r}")
        return g.mean[metric]


def _stats(records: list[ImageRecord]) -> GroupStats:
    n = len(records)
    mean, std = {}, {}
    for m in METRICS:
        vals = [r.value(m) for r in records]
        mu = math.fsum(vals) / n
        mean[m] = mu
        std[m] = 0.0 if n == 1 else math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / (n - 1))
    return GroupStats(n, mean, std)


def aggregate(records: Iterable[ImageRecord], include_normal: bool = False) -> MetricsReport:
    """Mean and sample std per (class group, fold), folds also pooled as ``"all"``.

    Class groups are ``benign``, ``malignant`` and ``all`` (plus ``normal``
    when ``include_normal``); empty groups are left out.
    """
    records = [r for r in records if include_normal or r.cls != "normal"]
    report = MetricsReport(records)
    classes = ["benign", "malignant"] + (["normal"] if include_normal else [])
    folds = sorted({str(r.fold) for r in records})
    for fold in folds + ["all"]:
        in_fold = [r for r in records if fold == "all" or str(r.fold) == fold]
        for cls in classes + ["all"]:
            group = [r for r in in_fold if cls == "all" or r.cls == cls]
            if group:
                report.groups[(cls, fold)] = _stats(group)
    return report


CSV_COLUMNS = ("id", "fold", "class", "dsc", "iou", "se", "sp")


def write_report_csv(report: MetricsReport, path: str | Path) -> None:
    """Per-image rows, then ``mean``/``std`` rows for every group."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.records:
            w.writerow([r.id, r.fold, r.cls] + [repr(r.value(m)) for m in METRICS])
        for (cls, fold), g in report.groups.items():
            w.writerow(["mean", fold, cls] + [repr(g.mean[m]) for m in METRICS])
            w.writerow(["std", fold, cls] + [repr(g.std[m]) for m in METRICS])
