"""Confusion counts and segmentation scores.

Counts are one-vs-rest per class: for class ``c`` a pixel is positive when
its label equals ``c``. Dice is the standard ``2TP / (2TP + FP + FN)``.
Empty-set conventions: Dice of two empty masks, sensitivity with no true
positives to find, and specificity with no true negatives to find are all 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _validate(pred: np.ndarray, truth: np.ndarray, num_classes: int | None) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and arr.min() < 0:
            raise ValueError(f"{name} has negative labels")
        if num_classes is not None and arr.size and arr.max() >= num_classes:
            raise ValueError(f"{name} label {arr.max()} out of range for {num_classes} classes")


def confusion(pred, truth, class_id: int, num_classes: int | None = None) -> ConfusionCounts:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _validate(pred, truth, num_classes)
    if num_classes is not None and not 0 <= class_id < num_classes:
        raise ValueError(f"class {class_id} out of range")
    p, t = pred == class_id, truth == class_id
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, pred.size - tp - fp - fn, fp, fn)


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """(truth, pred) pixel tallies, shape (num_classes, num_classes)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _validate(pred, truth, num_classes)
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def counts_from_matrix(cm: np.ndarray) -> list[ConfusionCounts]:
    total = int(cm.sum())
    out = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        out.append(ConfusionCounts(tp, total - tp - fn - fp, fp, fn))
    return out


def accuracy(c: ConfusionCounts) -> float:
    """Per-class pixel accuracy ``(TP + TN) / total`` under one-vs-rest counting."""
    return (c.tp + c.tn) / c.total if c.total else 1.0


def sensitivity(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0


def specificity(c: ConfusionCounts) -> float:
    return c.tn / (c.tn + c.fp) if c.tn + c.fp else 1.0


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 1.0


SCORES = {
    "accuracy": accuracy,
    "sensitivity": sensitivity,
    "specificity": specificity,
    "dice": dice,
}


# ---------------------------------------------------------------------------
# region-composed scores


@dataclass(frozen=True)
class RegionSpec:
    name: str
    labels: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(int(v) for v in self.labels))
        if not self.labels:
            raise ValueError(f"region {self.name!r} needs at least one label")
        if min(self.labels) < 0:
            raise ValueError(f"region {self.name!r} has negative labels")


@dataclass(frozen=True)
class RegionScores:
    dice_plus: float
    sens_plus: float
    spec_plus: float


def region_counts(pred, truth, region: RegionSpec, num_classes: int | None = None) -> ConfusionCounts:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _validate(pred, truth, num_classes)
    if num_classes is not None and max(region.labels) >= num_classes:
        raise ValueError(f"region {region.name!r} has labels outside {num_classes} classes")
    labels = sorted(region.labels)
    m1 = np.isin(pred, labels)  # prediction inside the region
    n1 = np.isin(truth, labels)  # ground truth inside the region
    tp = int(np.count_nonzero(m1 & n1))
    tn = int(np.count_nonzero(~m1 & ~n1))
    return ConfusionCounts(tp, tn, int(np.count_nonzero(m1)) - tp, int(np.count_nonzero(n1)) - tp)


def region_scores_from_counts(c: ConfusionCounts) -> RegionScores:
    m1, n1 = c.tp + c.fp, c.tp + c.fn
    n0 = c.tn + c.fp
    dice_plus = c.tp / ((m1 + n1) / 2) if m1 + n1 else 1.0
    sens_plus = c.tp / n1 if n1 else 1.0
    spec_plus = c.tn / n0 if n0 else 1.0
    return RegionScores(dice_plus, sens_plus, spec_plus)


def region_scores(pred, truth, region: RegionSpec, num_classes: int | None = None) -> RegionScores:
    """Dice+, Sens+ and Spec+ on masks binarized by region membership."""
    return region_scores_from_counts(region_counts(pred, truth, region, num_classes))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class Summary:
    """Per-class scores under micro (pooled counts) and macro (per-image mean) schemes."""

    num_classes: int
    micro: dict[str, list[float]]
    macro: dict[str, list[float]]
    regions_micro: dict[str, RegionScores]
    regions_macro: dict[str, RegionScores]

    def mean_foreground(self, score: str = "dice", scheme: str = "macro") -> float:
        table = self.macro if scheme == "macro" else self.micro
        return float(np.mean(table[score][1:]))


def aggregate(
    per_image: Sequence[Sequence[ConfusionCounts]],
    per_image_regions: Sequence[dict[str, ConfusionCounts]] | None = None,
) -> Summary:
    """Summarize a batch of per-image, per-class confusion counts."""
    if not per_image:
        raise ValueError("cannot aggregate an empty batch")
    k = len(per_image[0])
    pooled = [sum((img[c] for img in per_image[1:]), per_image[0][c]) for c in range(k)]
    micro = {name: [fn(c) for c in pooled] for name, fn in SCORES.items()}
    macro = {
        name: [float(np.mean([fn(img[c]) for img in per_image])) for c in range(k)]
        for name, fn in SCORES.items()
    }
    regions_micro: dict[str, RegionScores] = {}
    regions_macro: dict[str, RegionScores] = {}
    if per_image_regions:
        for name in per_image_regions[0]:
            counts = [img[name] for img in per_image_regions]
            regions_micro[name] = region_scores_from_counts(sum(counts[1:], counts[0]))
            scores = [region_scores_from_counts(c) for c in counts]
            regions_macro[name] = RegionScores(
                float(np.mean([s.dice_plus for s in scores])),
                float(np.mean([s.sens_plus for s in scores])),
                float(np.mean([s.spec_plus for s in scores])),
            )
    return Summary(k, micro, macro, regions_micro, regions_macro)


def evaluate_labels(
    pred: np.ndarray,
    truth: np.ndarray,
    num_classes: int,
    regions: Iterable[RegionSpec] = (),
) -> Summary:
    """Score stacked label maps of shape (N, H, W)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    regions = list(regions)
    per_image = [counts_from_matrix(confusion_matrix(p, t, num_classes)) for p, t in zip(pred, truth)]
    per_region = [
        {r.name: region_counts(p, t, r, num_classes) for r in regions} for p, t in zip(pred, truth)
    ]
    return aggregate(per_image, per_region if regions else None)


def write_report(summary: Summary, path, scheme: str = "macro", regions: Sequence[RegionSpec] = ()) -> None:
    """CSV with a per-class section and, after a blank line, a per-region section."""
    table = summary.macro if scheme == "macro" else summary.micro
    region_table = summary.regions_macro if scheme == "macro" else summary.regions_micro
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", *SCORES])
        for c in range(summary.num_classes):
            w.writerow([c, *(f"{table[name][c]:.6f}" for name in SCORES)])
        if region_table:
            w.writerow([])
            w.writerow(["region", "labels", "dice_plus", "sens_plus", "spec_plus"])
            labels = {r.name: r.labels for r in regions}
            for name, rs in region_table.items():
                lab = "+".join(str(v) for v in sorted(labels.get(name, ())))
                w.writerow([name, lab, f"{rs.dice_plus:.6f}", f"{rs.sens_plus:.6f}", f"{rs.spec_plus:.6f}"])


def parse_regions(text: str) -> list[RegionSpec]:
    """Parse ``"WT=1,2,3;ET=2,3"`` into region specs."""
    regions = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        name, sep, labels = chunk.partition("=")
        if not sep or not name.strip():
            raise ValueError(f"bad region {chunk!r}, expected NAME=l1,l2")
        regions.append(RegionSpec(name.strip(), frozenset(int(v) for v in labels.split(","))))
    return regions
