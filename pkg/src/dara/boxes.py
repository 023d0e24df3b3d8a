"""Box conversions and overlap metrics on plain numbers.

Metrics take corner boxes ``(x1, y1, x2, y2)``; model outputs and ground
truth use normalized ``(cx, cy, w, h)`` and go through :func:`cxcywh_to_xyxy`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError

ACC_THRESHOLD = 0.5


def cxcywh_to_xyxy(box) -> np.ndarray:
    cx, cy, w, h = np.asarray(box, dtype=float)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def xyxy_to_cxcywh(box) -> np.ndarray:
    x1, y1, x2, y2 = np.asarray(box, dtype=float)
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])


def _check(box) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 < x1 or y2 < y1:
        raise ContractError(f"box {box} has negative width or height")
    return x1, y1, x2, y2


def _overlap(a, b) -> tuple[float, float, float, tuple]:
    ax1, ay1, ax2, ay2 = _check(a)
    bx1, by1, bx2, by2 = _check(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (min(ax1, bx1), min(ay1, by1), max(ax2, bx2), max(ay2, by2))
    return inter, union, (hull[2] - hull[0]) * (hull[3] - hull[1]), hull


def iou(a, b) -> float:
    inter, union, _, _ = _overlap(a, b)
    return inter / union if union > 0 else 0.0


def giou(a, b) -> float:
    """Generalized IoU: ``IoU - (area(C) - area(U)) / area(C)``.

    ``C`` is the smallest enclosing box. When ``C`` has zero area the result
    is 0 for two identical points and an error otherwise.
    """
    inter, union, hull_area, _ = _overlap(a, b)
    if hull_area <= 0:
        if tuple(map(float, a)) == tuple(map(float, b)) and a[0] == a[2] and a[1] == a[3]:
            return 0.0
        raise ContractError(f"degenerate enclosing box for {a} and {b}")
    overlap = inter / union if union > 0 else 0.0
    return overlap - (hull_area - union) / hull_area


def accuracy_at_05(preds: Sequence, gts: Sequence) -> float:
    """Fraction of corner-box pairs with IoU of at least 0.5."""
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ContractError("accuracy of an empty set is undefined")
    hits = sum(iou(p, g) >= ACC_THRESHOLD for p, g in zip(preds, gts))
    return hits / len(preds)
