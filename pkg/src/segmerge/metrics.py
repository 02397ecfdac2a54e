"""Confusion-matrix accumulation and IoU / mIoU evaluation.

Accumulation is pure integer counting, so partial matrices from any
number of workers merge into exactly the sequential result. Ground-truth
pixels labelled ignore never enter the matrix. Classes whose union is
empty stay undefined and are left out of means rather than scored.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping

import numpy as np

from .errors import SegmergeError
from .raster import AnnotationRaster
from .taxonomy import IGNORE_ID, UNIVERSAL, UniversalLabelSpace


@dataclass(frozen=True)
class ConfusionMatrix:
    """k x k pixel tallies, counts[g, p] = ground truth g predicted as p."""

    k: int
    counts: np.ndarray  # (k, k) int64

    def __post_init__(self):
        if self.counts.shape != (self.k, self.k):
            raise SegmergeError("confusion counts must be k x k")
        self.counts.flags.writeable = False

    @classmethod
    def zero(cls, k: int) -> "ConfusionMatrix":
        return cls(k=k, counts=np.zeros((k, k), dtype=np.int64))


@dataclass(frozen=True)
class IoUReport:
    per_class: Mapping[int, float]
    mean_iou: float
    evaluated_classes: frozenset[int]


def _check_universal(raster: AnnotationRaster, role: str) -> None:
    if raster.space != UNIVERSAL:
        raise SegmergeError(f"{role} raster is in space {raster.space!r}, not universal")


def accumulate(
    m: ConfusionMatrix, gt: AnnotationRaster, pred: AnnotationRaster
) -> ConfusionMatrix:
    """Count every non-ignore ground-truth pixel against its prediction."""
    _check_universal(gt, "ground-truth")
    _check_universal(pred, "prediction")
    if gt.ids.shape != pred.ids.shape:
        raise SegmergeError(
            f"dimension mismatch: gt {gt.width}x{gt.height} vs "
            f"pred {pred.width}x{pred.height}"
        )
    k = m.k
    gt_flat = gt.ids.reshape(-1).astype(np.int64)
    pred_flat = pred.ids.reshape(-1).astype(np.int64)
    keep = gt_flat != IGNORE_ID
    if (gt_flat[keep] >= k).any():
        raise SegmergeError(f"ground-truth id out of range for k={k}")
    # predictions under an ignore-labelled pixel are skipped, not judged
    scored = pred_flat[keep]
    if (scored >= k).any():
        bad = int(scored[scored >= k][0])
        raise SegmergeError(f"prediction id {bad} out of range for k={k}")
    pair = gt_flat[keep] * k + scored
    update = np.bincount(pair, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k=k, counts=m.counts + update)


def merge_confusions(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.k != b.k:
        raise SegmergeError(f"cannot merge confusion matrices of size {a.k} and {b.k}")
    return ConfusionMatrix(k=a.k, counts=a.counts + b.counts)


def iou_per_class(m: ConfusionMatrix) -> dict[int, float]:
    """IoU = TP / (TP + FP + FN) per class; classes with an empty union
    are absent from the result."""
    tp = np.diag(m.counts)
    union = m.counts.sum(axis=0) + m.counts.sum(axis=1) - tp
    return {
        int(c): float(tp[c]) / float(union[c])
        for c in range(m.k)
        if union[c] > 0
    }


def mean_iou(m: ConfusionMatrix, subset: Iterable[int] | None = None) -> float:
    """Arithmetic mean of the defined per-class IoUs, optionally restricted
    to a class subset."""
    per_class = iou_per_class(m)
    classes = sorted(per_class) if subset is None else sorted(set(subset) & set(per_class))
    if not classes:
        raise SegmergeError("no class with a defined IoU in the requested subset")
    return sum(per_class[c] for c in classes) / len(classes)


def iou_report(m: ConfusionMatrix, subset: Iterable[int] | None = None) -> IoUReport:
    per_class = iou_per_class(m)
    classes = sorted(per_class) if subset is None else sorted(set(subset) & set(per_class))
    if not classes:
        raise SegmergeError("no class with a defined IoU in the requested subset")
    restricted = {c: per_class[c] for c in classes}
    return IoUReport(
        per_class=restricted,
        mean_iou=sum(restricted.values()) / len(restricted),
        evaluated_classes=frozenset(classes),
    )


def exclusivity_counts(
    pred: AnnotationRaster, reachable: frozenset[int]
) -> tuple[int, int]:
    """(pixels predicted inside the reachable set, non-ignore pixels)."""
    _check_universal(pred, "prediction")
    flat = pred.ids.reshape(-1)
    evaluated = flat != IGNORE_ID
    table = np.zeros(256, dtype=bool)
    for c in reachable:
        table[c] = True
    return int(table[flat[evaluated]].sum()), int(evaluated.sum())


def domain_exclusivity(pred: AnnotationRaster, reachable: frozenset[int]) -> float:
    """Fraction of non-ignore predicted pixels whose class belongs to the
    reachable set of the image's source dataset."""
    inside, total = exclusivity_counts(pred, reachable)
    if total == 0:
        raise SegmergeError("prediction holds no non-ignore pixel")
    return inside / total


def per_domain_report(
    confusions: Mapping[str, ConfusionMatrix],
    space: UniversalLabelSpace,
    exclusivity: Mapping[str, float] | None = None,
) -> dict:
    """Per-dataset mIoU over that dataset's reachable classes.

    Each dataset is averaged over the universal classes it contributed to;
    a merged class therefore shows up for every contributor. The full
    matrix stays k x k, so out-of-domain predictions still count as false
    negatives of the true class.
    """
    names = {c.id: c.name for c in space.classes}
    datasets = {}
    for dataset_id in sorted(confusions):
        m = confusions[dataset_id]
        if int(m.counts.sum()) == 0:
            raise SegmergeError(f"dataset {dataset_id!r} accumulated zero pixels")
        reachable = space.reachable(dataset_id)
        if not reachable:
            raise SegmergeError(f"dataset {dataset_id!r} contributes no class")
        report = iou_report(m, subset=reachable)
        entry = {
            "miou": report.mean_iou,
            "per_class": {names[c]: report.per_class[c] for c in sorted(report.per_class)},
            "evaluated_classes": [names[c] for c in sorted(report.evaluated_classes)],
        }
        if exclusivity is not None and dataset_id in exclusivity:
            entry["exclusivity"] = exclusivity[dataset_id]
        datasets[dataset_id] = entry
    return {"datasets": datasets, "averaging": "reachable-classes"}


def format_percent(value: float, decimals: int = 2) -> str:
    """Half-up percentage rounding, applied only at presentation time."""
    quantum = Decimal(1).scaleb(-decimals) if decimals else Decimal(1)
    return str(Decimal(repr(value * 100)).quantize(quantum, rounding=ROUND_HALF_UP))


def report_table(report: dict, space: UniversalLabelSpace) -> str:
    """Aligned plain-text table: one mIoU/exclusivity row per dataset, then
    per-class IoU columns per dataset."""
    datasets = sorted(report["datasets"])
    lines = []
    header = f"{'dataset':<16} {'mIoU [%]':>10} {'exclusivity':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for ds in datasets:
        entry = report["datasets"][ds]
        exclusivity = entry.get("exclusivity")
        shown = f"{exclusivity:.4f}" if exclusivity is not None else "-"
        lines.append(f"{ds:<16} {format_percent(entry['miou']):>10} {shown:>12}")

    name_width = max((len(c.name) for c in space.classes), default=5)
    lines.append("")
    lines.append(
        f"{'class':<{name_width}} " + " ".join(f"{ds:>16}" for ds in datasets)
    )
    for cls in space.classes:
        row = [f"{cls.name:<{name_width}}"]
        seen = False
        for ds in datasets:
            iou = report["datasets"][ds]["per_class"].get(cls.name)
            if iou is None:
                row.append(f"{'-':>16}")
            else:
                row.append(f"{format_percent(iou):>16}")
                seen = True
        if seen:
            lines.append(" ".join(row))
    return "\n".join(lines) + "\n"
