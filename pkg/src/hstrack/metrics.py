"""Tracking evaluation: precision/success curves, AUC, DP@20, attributes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox, center_distance
from .loss import iou

PRECISION_THRESHOLDS = tuple(float(t) for t in range(0, 51))
SUCCESS_THRESHOLDS = tuple(t * 0.05 for t in range(21))
_GRID_TOL = 1e-9


@dataclass(frozen=True)
class EvalCurve:
    thresholds: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.thresholds) != len(self.values):
            raise ValueError("curve thresholds and values must have equal length")


def _check_lengths(pred_boxes, gt_boxes):
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predictions vs {len(gt_boxes)} ground truths")
    if not pred_boxes:
        raise ValueError("empty box lists")


def precision_curve(
    pred_boxes: list[BoundingBox],
    gt_boxes: list[BoundingBox],
    thresholds: tuple[float, ...] = PRECISION_THRESHOLDS,
) -> EvalCurve:
    """Fraction of frames whose predicted center is within tau pixels."""
    _check_lengths(pred_boxes, gt_boxes)
    dists = np.array([center_distance(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    values = tuple(float(np.count_nonzero(dists <= t)) / len(dists) for t in thresholds)
    return EvalCurve(tuple(thresholds), values)


def success_curve(
    pred_boxes: list[BoundingBox],
    gt_boxes: list[BoundingBox],
    thresholds: tuple[float, ...] = SUCCESS_THRESHOLDS,
) -> EvalCurve:
    """Fraction of frames whose IoU meets tau (strictly > 0 at tau = 0)."""
    _check_lengths(pred_boxes, gt_boxes)
    ious = np.array([iou(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    values = []
    for t in thresholds:
        if t == 0.0:
            values.append(float(np.count_nonzero(ious > 0.0)) / len(ious))
        else:
            values.append(float(np.count_nonzero(ious >= t)) / len(ious))
    return EvalCurve(tuple(thresholds), tuple(values))


def auc(curve: EvalCurve) -> float:
    """Mean curve value over its threshold grid."""
    return sum(curve.values) / len(curve.values)


def dp_at(curve: EvalCurve, tau: float = 20.0) -> float:
    """Curve value at an exact grid threshold; off-grid taus are refused."""
    for t, v in zip(curve.thresholds, curve.values):
        if abs(t - tau) <= _GRID_TOL:
            return v
    raise ValueError(f"threshold {tau} not on the curve grid; interpolation refused")


@dataclass
class SequenceResult:
    name: str
    pred_boxes: list[BoundingBox]
    gt_boxes: list[BoundingBox]
    attributes: set[str]


def evaluate_sequences(results: list[SequenceResult]) -> dict:
    """Build the full evaluation report across sequences.

    Overall curves pool all frames; per-attribute rows pool the frames of
    every sequence carrying that tag.
    """
    all_pred = [b for r in results for b in r.pred_boxes]
    all_gt = [b for r in results for b in r.gt_boxes]
    prec = precision_curve(all_pred, all_gt)
    succ = success_curve(all_pred, all_gt)

    per_sequence = []
    for r in results:
        p = precision_curve(r.pred_boxes, r.gt_boxes)
        s = success_curve(r.pred_boxes, r.gt_boxes)
        per_sequence.append(
            {
                "name": r.name,
                "frames": len(r.pred_boxes),
                "auc": auc(s),
                "dp20": dp_at(p),
                "attributes": sorted(r.attributes),
            }
        )

    tags = sorted({t for r in results for t in r.attributes})
    per_attribute = attribute_breakdown(results, tags)

    return {
        "overall": {
            "auc": auc(succ),
            "dp20": dp_at(prec),
            "auc_precision": auc(prec),
        },
        "per_sequence": per_sequence,
        "per_attribute": per_attribute,
        "curves": {
            "precision": {"thresholds": list(prec.thresholds), "values": list(prec.values)},
            "success": {"thresholds": list(succ.thresholds), "values": list(succ.values)},
        },
    }


def attribute_breakdown(results: list[SequenceResult], tags) -> dict:
    """AUC and DP@20 over the pooled frames of sequences carrying each tag."""
    table = {}
    for tag in tags:
        tagged = [r for r in results if tag in r.attributes]
        if not tagged:
            table[tag] = {"sequences": 0, "frames": 0, "empty": True}
            continue
        pred = [b for r in tagged for b in r.pred_boxes]
        gt = [b for r in tagged for b in r.gt_boxes]
        table[tag] = {
            "sequences": len(tagged),
            "frames": len(pred),
            "auc": auc(success_curve(pred, gt)),
            "dp20": dp_at(precision_curve(pred, gt)),
        }
    return table
