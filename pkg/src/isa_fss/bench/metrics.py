"""Binary segmentation metrics."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import DimensionError


def class_ious(pred: np.ndarray, gt: np.ndarray) -> list[float]:
    """IoU of background then foreground; a class absent from both is skipped."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} != gt {gt.shape}")
    out = []
    for p, g in ((~pred, ~gt), (pred, gt)):
        union = int(np.count_nonzero(p | g))
        if union:
            out.append(np.count_nonzero(p & g) / union)
    return out


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over the fg/bg classes of intersection over union."""
    ious = class_ious(pred, gt)
    return float(np.mean(ious)) if ious else 1.0


def mean_miou(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    values = [miou(p, g) for p, g in pairs]
    if not values:
        raise ValueError("mean_miou needs at least one (pred, gt) pair")
    return float(np.mean(values))
