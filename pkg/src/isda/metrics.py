"""COCO-protocol mask average precision for small images.

Per class and area range, detections are matched greedily in descending
confidence to the unmatched ground truth of highest IoU at each threshold in
0.50:0.05:0.95, and precision is interpolated at 101 recall points. Ground
truth outside the area range is ignored, as are detections matched to it and
unmatched detections outside the range. Area ranges are fractions of the
image area: small < 1.5%, medium < 10%, large otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, np.inf), "small": (0.0, 0.015), "medium": (0.015, 0.10), "large": (0.10, np.inf)}
MAX_DETS = 100

# (class_id, confidence, bool mask [H, W])
Prediction = tuple[int, float, np.ndarray]
# (class_id, bool mask [H, W])
GroundTruth = tuple[int, np.ndarray]


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    AP_S: float
    AP_M: float
    AP_L: float
    per_class: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "AP": self.AP,
            "AP50": self.AP50,
            "AP75": self.AP75,
            "AP_S": self.AP_S,
            "AP_M": self.AP_M,
            "AP_L": self.AP_L,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }


def mask_iou_matrix(dets: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not len(dets) or not len(gts):
        return np.zeros((len(dets), len(gts)))
    d = np.stack([m.reshape(-1) for m in dets]).astype(np.float64)
    g = np.stack([m.reshape(-1) for m in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _sort_key(pred: Prediction) -> tuple:
    # confidence first; the mask bytes make ties independent of input order
    return (-float(pred[1]), np.packbits(np.asarray(pred[2], dtype=bool)).tobytes())


def _match_image(dets, gts, lo, hi, img_area):
    """Greedy matching for one image/class/area range.

    Returns (scores, tp[T, D], ignored[T, D], n_gt_counted).
    """
    g_area = np.array([m.sum() for _, m in gts], dtype=np.float64) / img_area
    g_ignore = (g_area < lo) | (g_area >= hi)
    order = np.argsort(g_ignore, kind="stable")  # counted ground truth first
    gts = [gts[i] for i in order]
    g_ignore = g_ignore[order]
    dets = sorted(dets, key=_sort_key)[:MAX_DETS]
    ious = mask_iou_matrix([m for _, _, m in dets], [m for _, m in gts])
    d_area = np.array([m.sum() for _, _, m in dets], dtype=np.float64) / img_area

    t_n, d_n, g_n = len(IOU_THRESHOLDS), len(dets), len(gts)
    tp = np.zeros((t_n, d_n), dtype=bool)
    d_ignore = np.zeros((t_n, d_n), dtype=bool)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        taken = np.zeros(g_n, dtype=bool)
        for di in range(d_n):
            best, m = min(thr, 1 - 1e-10), -1
            for gi in range(g_n):
                if taken[gi]:
                    continue
                if m > -1 and not g_ignore[m] and g_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best, m = ious[di, gi], gi
            if m == -1:
                continue
            taken[m] = True
            d_ignore[ti, di] = g_ignore[m]
            tp[ti, di] = True
        outside = (d_area < lo) | (d_area >= hi)
        d_ignore[ti] |= ~tp[ti] & outside
    scores = np.array([s for _, s, _ in dets], dtype=np.float64)
    return scores, tp, d_ignore, int((~g_ignore).sum())


def _average_precision(scores, tp, ignored, n_gt) -> np.ndarray:
    """AP per IoU threshold from pooled detections; NaN when there is no ground truth."""
    if n_gt == 0:
        return np.full(len(IOU_THRESHOLDS), np.nan)
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[:, order]
    ignored = ignored[:, order]
    out = np.zeros(len(IOU_THRESHOLDS))
    for ti in range(len(IOU_THRESHOLDS)):
        keep = ~ignored[ti]
        tps = np.cumsum(tp[ti][keep])
        fps = np.cumsum(~tp[ti][keep])
        if tps.size == 0:
            continue
        recall = tps / n_gt
        precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
        precision = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
        out[ti] = q.mean()
    return out


def evaluate(
    predictions: Mapping[int, Sequence[Prediction]],
    ground_truth: Mapping[int, Sequence[GroundTruth]],
) -> EvalReport:
    """Mask AP over a set of images keyed by image id."""
    if set(predictions) != set(ground_truth):
        missing = set(ground_truth) ^ set(predictions)
        raise ValueError(f"image ids differ between predictions and ground truth: {sorted(missing)[:10]}")
    classes = sorted({c for gts in ground_truth.values() for c, _ in gts} | {
        c for dets in predictions.values() for c, _, _ in dets
    })
    image_ids = sorted(ground_truth)
    ap = {}  # (class, area) -> [T]
    for c in classes:
        for name, (lo, hi) in AREA_RANGES.items():
            scores, tps, igns, n_gt = [], [], [], 0
            for img in image_ids:
                gts = [g for g in ground_truth[img] if g[0] == c]
                dets = [d for d in predictions[img] if d[0] == c]
                shape = (gts[0][1] if gts else dets[0][2]) if (gts or dets) else None
                if shape is None:
                    continue
                s, tp, ig, n = _match_image(dets, gts, lo, hi, shape.size)
                scores.append(s)
                tps.append(tp)
                igns.append(ig)
                n_gt += n
            if scores:
                ap[c, name] = _average_precision(
                    np.concatenate(scores), np.concatenate(tps, 1), np.concatenate(igns, 1), n_gt
                )
            else:
                ap[c, name] = np.full(len(IOU_THRESHOLDS), np.nan)

    def summarize(area: str, t: int | None = None) -> float:
        vals = np.array([ap[c, area] if t is None else ap[c, area][t : t + 1] for c in classes])
        vals = vals[~np.isnan(vals)] if vals.size else vals
        return float(vals.mean()) if vals.size else 0.0

    per_class = {}
    for c in classes:
        v = ap[c, "all"]
        if not np.isnan(v).all():
            per_class[c] = float(np.nanmean(v))
    return EvalReport(
        AP=summarize("all"),
        AP50=summarize("all", 0),
        AP75=summarize("all", 5),
        AP_S=summarize("small"),
        AP_M=summarize("medium"),
        AP_L=summarize("large"),
        per_class=per_class,
    )
