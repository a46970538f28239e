"""Segmentation and reconstruction quality metrics.

Panoptic quality is computed per frame and, for multi-view consistency, over
whole sequences: same-ID pixels are merged across views into one subset per
ID before matching, so a predictor that fragments an object across views is
penalized even if every single frame looks perfect.  A predicted subset
matches a ground-truth subset iff their IoU strictly exceeds 0.5, which makes
the matching unique without any assignment search.  ID 0 is background/void
and never forms a subset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MATCH_IOU = 0.5


@dataclass
class PqReport:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    per_class: dict[int, "PqReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "per_class": {str(c): r.to_dict() for c, r in self.per_class.items()},
        }
        return out


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; empty union gives 0."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def _stack(maps) -> np.ndarray:
    arr = np.asarray(maps)
    if arr.ndim == 2:
        arr = arr[None]
    return arr.reshape(arr.shape[0], -1)


def _subset_classes(ids_flat: np.ndarray, sem_flat: np.ndarray | None, ids: np.ndarray) -> np.ndarray:
    """Majority semantic class per subset; class 0 when no semantics given."""
    if sem_flat is None:
        return np.zeros(len(ids), dtype=np.int64)
    out = np.zeros(len(ids), dtype=np.int64)
    for i, v in enumerate(ids):
        cls, counts = np.unique(sem_flat[ids_flat == v], return_counts=True)
        out[i] = cls[np.argmax(counts)]
    return out


def _pq_from_flat(pred: np.ndarray, gt: np.ndarray, pred_sem, gt_sem) -> PqReport:
    pred_ids, pred_counts = np.unique(pred[pred != 0], return_counts=True)
    gt_ids, gt_counts = np.unique(gt[gt != 0], return_counts=True)
    pred_size = dict(zip(pred_ids.tolist(), pred_counts.tolist()))
    gt_size = dict(zip(gt_ids.tolist(), gt_counts.tolist()))

    both = (pred != 0) & (gt != 0)
    inter: dict[tuple[int, int], int] = {}
    if both.any():
        pairs = np.stack([pred[both], gt[both]], axis=1)
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        inter = {(int(p), int(g)): int(c) for (p, g), c in zip(uniq, counts)}

    pred_cls = dict(zip(pred_ids.tolist(), _subset_classes(pred, pred_sem, pred_ids).tolist()))
    gt_cls = dict(zip(gt_ids.tolist(), _subset_classes(gt, gt_sem, gt_ids).tolist()))

    matches: list[tuple[int, int, float]] = []
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for (p, g), c in sorted(inter.items()):
        if pred_cls[p] != gt_cls[g]:
            continue
        ov = c / (pred_size[p] + gt_size[g] - c)
        if ov > MATCH_IOU:
            matches.append((p, g, float(ov)))
            matched_pred.add(p)
            matched_gt.add(g)

    def report_for(pred_subset, gt_subset, match_subset) -> PqReport:
        tp = len(match_subset)
        fp = len(pred_subset) - tp
        fn = len(gt_subset) - tp
        iou_sum = sum(m[2] for m in match_subset)
        denom = tp + 0.5 * fp + 0.5 * fn
        if denom == 0:
            return PqReport(1.0, 1.0, 1.0, 0, 0, 0, list(match_subset))
        pq = iou_sum / denom
        sq = iou_sum / tp if tp else 0.0
        rq = tp / denom
        return PqReport(pq, sq, rq, tp, fp, fn, list(match_subset))

    total = report_for(pred_ids.tolist(), gt_ids.tolist(), matches)
    classes = sorted(set(pred_cls.values()) | set(gt_cls.values()))
    for c in classes:
        pc = [p for p in pred_ids.tolist() if pred_cls[p] == c]
        gc = [g for g in gt_ids.tolist() if gt_cls[g] == c]
        mc = [m for m in matches if gt_cls[m[1]] == c]
        total.per_class[c] = report_for(pc, gc, mc)
    return total


def pq_frame(pred: np.ndarray, gt: np.ndarray, pred_sem: np.ndarray | None = None, gt_sem: np.ndarray | None = None) -> PqReport:
    """Panoptic quality of one frame: sum of matched IoUs over TP + FP/2 + FN/2."""
    return _pq_from_flat(
        np.asarray(pred).ravel(),
        np.asarray(gt).ravel(),
        None if pred_sem is None else np.asarray(pred_sem).ravel(),
        None if gt_sem is None else np.asarray(gt_sem).ravel(),
    )


def pq_scene(preds, gts, pred_sems=None, gt_sems=None) -> PqReport:
    """Scene-level panoptic quality over a sequence of frames.

    All pixels carrying one ID are merged across views into a single subset
    on each side before matching, and matching is restricted to subsets of
    the same (majority) semantic class.
    """
    pred = _stack(preds).ravel()
    gt = _stack(gts).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    ps = None if pred_sems is None else _stack(pred_sems).ravel()
    gs = None if gt_sems is None else _stack(gt_sems).ravel()
    return _pq_from_flat(pred, gt, ps, gs)


def miou(pred_sem, gt_sem) -> float:
    """Mean IoU over the semantic classes present in the ground truth."""
    pred = _stack(pred_sem).ravel()
    gt = _stack(gt_sem).ravel()
    classes = np.unique(gt)
    vals = [iou(pred == c, gt == c) for c in classes]
    return float(np.mean(vals)) if vals else 0.0


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    Identical inputs return +inf rather than a capped value.
    """
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(-10.0 * math.log10(mse))
