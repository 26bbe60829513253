"""Bipartite matching of predictions to ground truth and the set-prediction loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

LAMBDA_CLS = 1.0
LAMBDA_MASK = 3.0
NOOBJ_WEIGHT = 0.1


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (gt_index, prediction_index), sorted by gt
    unmatched: list[int]

    @property
    def gt_indices(self) -> list[int]:
        return [g for g, _ in self.pairs]

    @property
    def pred_indices(self) -> list[int]:
        return [p for _, p in self.pairs]


@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls_term: torch.Tensor
    mask_term: torch.Tensor
    lambda_cls: float = LAMBDA_CLS
    lambda_mask: float = LAMBDA_MASK
    assignment: Assignment | None = field(default=None, repr=False)


def soft_mask_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Soft IoU ``sum(p*g) / (sum(p) + sum(g) - sum(p*g))`` over the last two axes.

    Broadcasts over leading axes; two empty masks have IoU 0.
    """
    if pred.shape[-2:] != gt.shape[-2:]:
        raise ValueError(f"mask shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    inter = (pred * gt).sum((-2, -1))
    union = pred.sum((-2, -1)) + gt.sum((-2, -1)) - inter
    return inter / union.clamp(min=1e-6)


def pairwise_soft_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """``pred [N,H,W]``, ``gt [G,H,W]`` -> ``[G,N]`` soft IoU matrix."""
    p = pred.flatten(1)
    g = gt.flatten(1).to(p.dtype)
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    return inter / union.clamp(min=1e-6)


def match_cost(
    class_prob: torch.Tensor,
    mask_prob: torch.Tensor,
    gt_classes: torch.Tensor,
    gt_masks: torch.Tensor,
    lambda_cls: float = LAMBDA_CLS,
    lambda_mask: float = LAMBDA_MASK,
) -> torch.Tensor:
    """Cost matrix ``[G, N]``: ``-lambda_cls * p_j(c_i) + lambda_mask * (1 - IoU(m_j, m_i))``."""
    g, n = len(gt_classes), class_prob.shape[0]
    if g > n:
        raise ValueError(f"more objects than queries: {g} ground-truth instances, {n} predictions")
    cls_cost = -class_prob[:, gt_classes.long()].T
    mask_cost = 1 - pairwise_soft_iou(mask_prob, gt_masks)
    return lambda_cls * cls_cost + lambda_mask * mask_cost


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every row to a distinct column (rows <= columns).

    Shortest augmenting paths with dual potentials, O(G^2 N). Ties are
    broken towards the lowest column (prediction) index, so the result is
    deterministic.
    """
    c = np.asarray(cost.detach().cpu() if isinstance(cost, torch.Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = c.shape
    if rows > cols:
        raise ValueError(f"more objects than queries: {rows} rows, {cols} columns")
    if rows == 0:
        return Assignment([], list(range(cols)))

    # 1-based arrays; column 0 is the virtual source
    u = np.zeros(rows + 1)
    v = np.zeros(cols + 1)
    owner = np.zeros(cols + 1, dtype=np.int64)
    way = np.zeros(cols + 1, dtype=np.int64)
    for i in range(1, rows + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(cols + 1, np.inf)
        used = np.zeros(cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1  # argmin returns the first, i.e. lowest, index
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = sorted((int(owner[j]) - 1, j - 1) for j in range(1, cols + 1) if owner[j])
    matched = {p for _, p in pairs}
    return Assignment(pairs, [j for j in range(cols) if j not in matched])


def set_loss(
    class_logits: torch.Tensor,
    mask_prob: torch.Tensor,
    gt_classes: torch.Tensor,
    gt_masks: torch.Tensor,
    lambda_cls: float = LAMBDA_CLS,
    lambda_mask: float = LAMBDA_MASK,
    noobj_weight: float = NOOBJ_WEIGHT,
    assignment: Assignment | None = None,
) -> LossBreakdown:
    """Set-prediction loss for one image.

    ``class_logits [N, K+1]`` (last class is "no object"), ``mask_prob [N,H,W]``,
    ``gt_classes [G]``, ``gt_masks [G,H,W]``. The classification term is the
    cross-entropy over all N predictions, weighted-averaged with "no object"
    targets weighted by ``noobj_weight``; the mask term is the mean
    ``1 - soft IoU`` over matched pairs. Gradients flow through the loss at a
    fixed assignment; pass ``assignment`` to pin it.
    """
    n, k1 = class_logits.shape
    g = len(gt_classes)
    if g > n:
        raise ValueError(f"more objects than queries: {g} ground-truth instances, {n} predictions")
    if assignment is None:
        with torch.no_grad():
            cost = match_cost(
                class_logits.softmax(-1), mask_prob, gt_classes, gt_masks, lambda_cls, lambda_mask
            )
            assignment = hungarian(cost)

    target = torch.full((n,), k1 - 1, dtype=torch.long)
    weight = torch.ones(k1, dtype=class_logits.dtype)
    weight[-1] = noobj_weight
    gi, pi = assignment.gt_indices, assignment.pred_indices
    if g:
        target[pi] = gt_classes.long()[gi]
    cls_term = F.cross_entropy(class_logits, target, weight=weight)

    if g:
        iou = soft_mask_iou(mask_prob[pi], gt_masks[gi].to(mask_prob.dtype))
        mask_term = (1 - iou).mean()
    else:
        mask_term = mask_prob.new_zeros(())
    total = lambda_cls * cls_term + lambda_mask * mask_term
    return LossBreakdown(total, cls_term, mask_term, lambda_cls, lambda_mask, assignment)
