"""Per-organ Dice / average symmetric surface distance and table aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError
from .segmodel import predict


def dsc(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice coefficient; 1.0 if both masks are empty, 0.0 if exactly one is."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    size = int(pred_mask.sum()) + int(gt_mask.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred_mask, gt_mask).sum()) / size


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour.

    Voxels on the array border count as touching background.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    for axis in range(mask.ndim):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[core]
    return mask & ~interior


def asd(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    if not pred_mask.any() or not gt_mask.any():
        raise UndefinedMetricError("ASD is undefined when either mask is empty")
    s_pred, s_gt = surface(pred_mask), surface(gt_mask)
    # distance of every voxel to the nearest surface voxel of the other mask
    to_gt = ndimage.distance_transform_edt(~s_gt, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~s_pred, sampling=spacing)
    total = to_gt[s_pred].sum() + to_pred[s_gt].sum()
    return float(total / (s_pred.sum() + s_gt.sum()))


@dataclass
class MetricTable:
    dsc: Dict[int, float] = field(default_factory=dict)  # percent
    asd: Dict[int, float] = field(default_factory=dict)  # mm
    global_dsc: float = float("nan")
    global_asd: float = float("nan")
    # organs whose ASD was undefined on at least one volume (empty prediction)
    missing_asd: Dict[int, int] = field(default_factory=dict)

    def row(self, class_ids: Sequence[int], prefix: str = "") -> Dict[str, float]:
        out = {}
        for c in class_ids:
            out[f"{prefix}dsc_{c}"] = self.dsc.get(c, float("nan"))
        for c in class_ids:
            out[f"{prefix}asd_{c}"] = self.asd.get(c, float("nan"))
        out[f"{prefix}global_dsc"] = self.global_dsc
        out[f"{prefix}global_asd"] = self.global_asd
        return out


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


def evaluate_predictions(
    cases: Iterable[Tuple[np.ndarray, np.ndarray, Tuple[float, float, float]]],
    class_ids: Sequence[int],
) -> MetricTable:
    """Aggregate ``(prediction, ground truth, spacing)`` label maps.

    Each organ is averaged over the volumes whose ground truth contains it;
    the global scores are unweighted means over organs with data.
    """
    dsc_vals: Dict[int, List[float]] = {c: [] for c in class_ids}
    asd_vals: Dict[int, List[float]] = {c: [] for c in class_ids}
    missing: Dict[int, int] = {}
    for pred, gt, spacing in cases:
        for c in class_ids:
            g = gt == c
            if not g.any():
                continue
            p = pred == c
            dsc_vals[c].append(100.0 * dsc(p, g))
            try:
                asd_vals[c].append(asd(p, g, spacing))
            except UndefinedMetricError:
                missing[c] = missing.get(c, 0) + 1
    table = MetricTable(missing_asd=missing)
    for c in class_ids:
        if dsc_vals[c]:
            table.dsc[c] = _mean(dsc_vals[c])
        if asd_vals[c]:
            table.asd[c] = _mean(asd_vals[c])
    table.global_dsc = _mean(table.dsc.values())
    table.global_asd = _mean(table.asd.values())
    return table


def evaluate_model(m, datasets, class_ids: Optional[Sequence[int]] = None) -> MetricTable:
    """Arg-max segmentation of every labelled volume, aggregated per organ."""
    if class_ids is None:
        class_ids = range(1, m.n_classes)

    def cases():
        for item in datasets:
            pred = predict(m, item.volume.data[None])[0]
            yield pred, item.labels, item.volume.spacing

    return evaluate_predictions(cases(), list(class_ids))

