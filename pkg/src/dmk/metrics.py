"""Confusion-matrix scoring at pixel and building level.

Every score is derived from a :class:`ConfusionMatrix` (rows are ground truth,
columns are predictions). Scenes are micro-accumulated into one matrix, so the
order in which they are scored does not matter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labels import DamageClass, Polygon, SceneLabel, damage_to_mask_value
from .raster import MAX_CLASS, majority_class, polygon_coverage, rasterize, validate_mask

SEG_WEIGHT = 0.3
CLS_WEIGHT = 0.7


class MetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    k: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.k < 1:
            raise MetricError("class count must be positive")
        if self.counts is None:
            self.counts = np.zeros((self.k, self.k), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.k, self.k):
                raise MetricError(f"counts must be {self.k}x{self.k}")
            if (self.counts < 0).any():
                raise MetricError("counts must be nonnegative")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise MetricError("cannot merge matrices of different size")
        return ConfusionMatrix(self.k, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts).astype(np.float64)

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1).astype(np.float64)


def accumulate(
    cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray, ignore: np.ndarray | None = None
) -> ConfusionMatrix:
    """Return ``cm`` plus one count per pixel at ``(gt, pred)``.

    Pixels where ``ignore`` is true are skipped.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if ignore is not None:
        keep = ~np.asarray(ignore, dtype=bool)
        pred, gt = pred[keep], gt[keep]
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= cm.k):
            raise MetricError(f"{name} class out of range 0..{cm.k - 1}")
    counts = np.bincount(gt * cm.k + pred, minlength=cm.k * cm.k).reshape(cm.k, cm.k)
    return ConfusionMatrix(cm.k, cm.counts + counts)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both gt and prediction."""
    tp = cm.tp()
    denom = tp + cm.fp() + cm.fn()
    out = np.full(cm.k, np.nan)
    np.divide(tp, denom, out=out, where=denom > 0)
    return out


def miou(cm: ConfusionMatrix) -> float:
    if cm.k < 2:
        raise MetricError("mIoU needs at least two classes")
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        raise MetricError("mIoU undefined: every class is empty")
    return float(np.nanmean(iou))


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """``2TP / (2TP + FP + FN)``, 0 where the denominator is 0."""
    tp = cm.tp()
    denom = 2 * tp + cm.fp() + cm.fn()
    out = np.zeros(cm.k)
    np.divide(2 * tp, denom, out=out, where=denom > 0)
    return out


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Per-class F1 averaged with ground-truth support as weights."""
    support = cm.support()
    if support.sum() == 0:
        raise MetricError("weighted F1 undefined: no ground-truth mass")
    return float(np.dot(per_class_f1(cm), support) / support.sum())


def combined_score(seg_f1: float, cls_f1: float) -> float:
    for name, v in (("seg_f1", seg_f1), ("cls_f1", cls_f1)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"{name}={v} outside [0, 1]")
    return SEG_WEIGHT * seg_f1 + CLS_WEIGHT * cls_f1


def binary_f1(cm: ConfusionMatrix) -> float:
    """F1 of "building" (any class >= 1) against background (class 0)."""
    c = cm.counts
    tp = c[1:, 1:].sum()
    fp = c[0, 1:].sum()
    fn = c[1:, 0].sum()
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def binarize(cm: ConfusionMatrix) -> ConfusionMatrix:
    c = cm.counts
    return ConfusionMatrix(
        2, np.array([[c[0, 0], c[0, 1:].sum()], [c[1:, 0].sum(), c[1:, 1:].sum()]])
    )


def damage_matrix(cm: ConfusionMatrix) -> ConfusionMatrix:
    """Restrict a 5-class pixel matrix to ground-truth building pixels.

    The result keeps all five columns' information: a building pixel predicted
    as background stays a false negative of its true class.
    """
    c = cm.counts.copy()
    c[0, :] = 0
    return ConfusionMatrix(cm.k, c)


def damage_f1(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class F1 for damage classes 1..4 and their support-weighted mean."""
    dm = damage_matrix(cm)
    f1 = per_class_f1(dm)[1:]
    support = dm.support()[1:]
    if support.sum() == 0:
        return f1, 0.0
    return f1, float(np.dot(f1, support) / support.sum())


@dataclass
class BuildingScores:
    # 4x4 over damage ordinals 0..3
    matrix: ConfusionMatrix = field(default_factory=lambda: ConfusionMatrix(4))
    missed: int = 0

    def __add__(self, other: "BuildingScores") -> "BuildingScores":
        return BuildingScores(self.matrix + other.matrix, self.missed + other.missed)


def building_level_scores(
    pred: np.ndarray, gt_buildings: Sequence[tuple[Polygon, DamageClass | None]]
) -> BuildingScores:
    """Majority-vote each ground-truth footprint's predicted class.

    Background pixels inside a footprint do not vote; an all-background
    footprint counts as missed. Buildings without a damage class are skipped.
    """
    pred = validate_mask(pred)
    h, w = pred.shape
    counts = np.zeros((4, 4), dtype=np.int64)
    missed = 0
    for polygon, damage in gt_buildings:
        if damage is None:
            continue
        inside = polygon_coverage(polygon, w, h)
        vote = majority_class(pred[inside])
        if vote == 0:
            missed += 1
            continue
        counts[int(damage), vote - 1] += 1
    return BuildingScores(ConfusionMatrix(4, counts), missed)


def label_to_mask(label: SceneLabel) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth class mask and ignore mask for a scene.

    Buildings without a damage class go into the ignore mask so they stay out
    of every denominator. Later classified buildings overwrite ignored pixels.
    """
    w, h = label.width, label.height
    mask = np.zeros((h, w), dtype=np.uint8)
    ignore = np.zeros((h, w), dtype=bool)
    for b in label.buildings:
        cov = polygon_coverage(b.footprint, w, h)
        if b.damage is None:
            ignore |= cov
            mask[cov] = 0
        else:
            mask[cov] = damage_to_mask_value(b.damage)
            ignore[cov] = False
    return mask, ignore


@dataclass
class ScoreReport:
    seg_f1: float
    cls_f1_weighted: float
    per_class_f1: list[float]
    per_class_iou: list[float]
    miou: float
    combined: float
    pixel_matrix: ConfusionMatrix
    buildings: BuildingScores | None = None

    def to_dict(self, digits: int = 5) -> dict:
        def r(v):
            return float(f"{v:.{digits}f}")

        out = {
            "seg_f1": r(self.seg_f1),
            "cls_f1_weighted": r(self.cls_f1_weighted),
            "per_class_f1": [r(v) for v in self.per_class_f1],
            "per_class_iou": [r(v) for v in self.per_class_iou],
            "miou": r(self.miou),
            "combined": r(self.combined),
        }
        if self.buildings is not None:
            bm = self.buildings.matrix
            out["building_level"] = {
                "weighted_f1": r(weighted_f1(bm)) if bm.total else 0.0,
                "per_class_f1": [r(v) for v in per_class_f1(bm)],
                "missed": self.buildings.missed,
                "matrix": bm.counts.tolist(),
            }
        return out


def report_from_matrix(cm: ConfusionMatrix, buildings: BuildingScores | None = None) -> ScoreReport:
    seg = binary_f1(cm)
    f1s, cls = damage_f1(cm)
    bcm = binarize(cm)
    iou = per_class_iou(bcm)
    m = float(np.nanmean(iou)) if not np.all(np.isnan(iou)) else 0.0
    return ScoreReport(
        seg_f1=seg,
        cls_f1_weighted=cls,
        per_class_f1=[float(v) for v in f1s],
        per_class_iou=[0.0 if np.isnan(v) else float(v) for v in iou],
        miou=m,
        combined=combined_score(seg, cls),
        pixel_matrix=cm,
        buildings=buildings,
    )


def score_scene(pred: np.ndarray, label: SceneLabel) -> tuple[ConfusionMatrix, BuildingScores]:
    pred = validate_mask(pred)
    if pred.shape != (label.height, label.width):
        raise MetricError(
            f"scene {label.scene_id}: prediction {pred.shape} vs label {label.height}x{label.width}"
        )
    gt, ignore = label_to_mask(label)
    cm = accumulate(ConfusionMatrix(MAX_CLASS + 1), pred, gt, ignore)
    bs = building_level_scores(pred, [(b.footprint, b.damage) for b in label.buildings])
    return cm, bs


def score_dataset(
    preds: Mapping[str, np.ndarray], labels: Iterable[SceneLabel]
) -> ScoreReport:
    """Micro-accumulate every scene, then derive segmentation/damage/combined scores.

    Segmentation F1 is the binary building-vs-background F1. Damage F1 is the
    support-weighted F1 over classes 1-4 on ground-truth building pixels.
    """
    cm = ConfusionMatrix(MAX_CLASS + 1)
    bs = BuildingScores()
    for label in labels:
        if label.scene_id not in preds:
            raise MetricError(f"no prediction for scene {label.scene_id}")
        scene_cm, scene_bs = score_scene(preds[label.scene_id], label)
        cm = cm + scene_cm
        bs = bs + scene_bs
    return report_from_matrix(cm, bs)


def empty_prediction(label: SceneLabel) -> np.ndarray:
    return rasterize([], label.width, label.height)
