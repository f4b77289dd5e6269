"""
Segmentation metrics: IoU, F1, pixel accuracy and HD95

Empty-mask conventions:
- iou / f1 with no positive pixel in either mask -> 1.0
- hd95 with both masks empty -> 0.0; with exactly one empty -> the image
  diagonal (spacing-scaled)
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from errors import ContractError

METRIC_NAMES = ("iou", "f1", "acc", "hd95")
HD_PERCENTILE = 95


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(name: str, mask) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{name} mask must be binary")
    return arr.astype(bool)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = _binary("pred", pred), _binary("gt", gt)
    if pred.shape != gt.shape:
        raise ContractError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    return pred, gt


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def iou(counts: ConfusionCounts) -> float:
    denominator = counts.tp + counts.fp + counts.fn
    return counts.tp / denominator if denominator else 1.0


def f1(counts: ConfusionCounts) -> float:
    denominator = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denominator if denominator else 1.0


def acc(counts: ConfusionCounts) -> float:
    return (counts.tp + counts.tn) / counts.total if counts.total else 1.0


# ---------------------------------------------------------------------------
# Surface distances
# ---------------------------------------------------------------------------

def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or on the image edge"""
    mask = np.asarray(mask, dtype=bool)
    eroded = binary_erosion(mask, structure=generate_binary_structure(2, 1), border_value=0)
    return mask ^ eroded


def diagonal(shape: tuple[int, int], spacing=(1.0, 1.0)) -> float:
    return float(np.hypot(shape[0] * spacing[0], shape[1] * spacing[1]))


def surface_distances(pred, gt, spacing=(1.0, 1.0)) -> np.ndarray | None:
    """Pooled directed boundary distances pred->gt and gt->pred; None if a mask is empty"""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    pred_edge, gt_edge = boundary(pred), boundary(gt)
    to_gt = distance_transform_edt(~gt_edge, sampling=spacing)
    to_pred = distance_transform_edt(~pred_edge, sampling=spacing)
    return np.concatenate([to_gt[pred_edge], to_pred[gt_edge]])


def _empty_convention(pred, gt, spacing) -> float:
    pred, gt = _pair(pred, gt)
    return 0.0 if not pred.any() and not gt.any() else diagonal(pred.shape, spacing)


def hd95(pred, gt, spacing=(1.0, 1.0)) -> float:
    distances = surface_distances(pred, gt, spacing)
    if distances is None:
        return _empty_convention(pred, gt, spacing)
    return float(np.percentile(distances, HD_PERCENTILE))


def hausdorff(pred, gt, spacing=(1.0, 1.0)) -> float:
    distances = surface_distances(pred, gt, spacing)
    if distances is None:
        return _empty_convention(pred, gt, spacing)
    return float(distances.max())


def brute_force_distances(pred, gt, spacing=(1.0, 1.0)) -> np.ndarray | None:
    """All-pairs boundary distances (oracle for surface_distances)"""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(boundary(pred)) * scale
    b = np.argwhere(boundary(gt)) * scale
    pairwise = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return np.concatenate([pairwise.min(axis=1), pairwise.min(axis=0)])


def hd95_bruteforce(pred, gt, spacing=(1.0, 1.0)) -> float:
    distances = brute_force_distances(pred, gt, spacing)
    if distances is None:
        return _empty_convention(pred, gt, spacing)
    return float(np.percentile(distances, HD_PERCENTILE))


def hausdorff_bruteforce(pred, gt, spacing=(1.0, 1.0)) -> float:
    distances = brute_force_distances(pred, gt, spacing)
    if distances is None:
        return _empty_convention(pred, gt, spacing)
    return float(distances.max())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def image_metrics(pred, gt, spacing=(1.0, 1.0)) -> dict[str, float]:
    counts = confusion(pred, gt)
    return {"iou": iou(counts), "f1": f1(counts), "acc": acc(counts), "hd95": hd95(pred, gt, spacing)}


def evaluate_dataset(
    preds: Mapping[str, np.ndarray],
    gts: Mapping[str, np.ndarray],
    spacing=(1.0, 1.0),
    workers: int = 1,
) -> dict:
    """Per-image rows sorted by id plus dataset means"""
    if len(preds) != len(gts) or set(preds) != set(gts):
        missing = sorted(set(gts) ^ set(preds))
        raise ContractError(f"evaluate_dataset: {len(preds)} predictions vs {len(gts)} references (mismatch: {missing[:5]})")
    ids = sorted(preds)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(lambda i: {"id": i, **image_metrics(preds[i], gts[i], spacing)}, ids))
    mean = {name: float(np.mean([row[name] for row in rows])) if rows else 0.0 for name in METRIC_NAMES}
    return {"count": len(rows), "mean": mean, "per_image": rows}


def write_report(path: str | Path, report: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def counts_dict(counts: ConfusionCounts) -> dict[str, int]:
    return asdict(counts)
