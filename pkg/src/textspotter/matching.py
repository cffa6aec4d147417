"""Set matching between predictions and ground-truth text instances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import LossWeights
from .geometry import box_cxcywh_to_xyxy, pairwise_giou


@dataclass
class MatchAssignment:
    """``pairs`` holds ``(gt_index, pred_slot)`` sorted by gt index."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def gt_indices(self) -> list[int]:
        return [g for g, _ in self.pairs]

    @property
    def pred_slots(self) -> list[int]:
        return [p for _, p in self.pairs]


def focal_class_cost(prob: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0, eps: float = 1e-8) -> torch.Tensor:
    """Positive focal term minus negative focal term at ``prob``; lower means a better positive."""
    neg = (1 - alpha) * prob.pow(gamma) * -(1 - prob + eps).log()
    pos = alpha * (1 - prob).pow(gamma) * -(prob + eps).log()
    return pos - neg


def cost_matrix(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_boxes: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """``(M, N)`` matching cost: rows are ground truths, columns are prediction slots.

    logits: ``(N,)`` text logits; boxes: ``(N, 4)`` and gt_boxes ``(M, 4)`` in cxcywh.
    """
    prob = logits.sigmoid()
    c_cls = focal_class_cost(prob, weights.focal_alpha, weights.focal_gamma)
    c_l1 = torch.cdist(gt_boxes, boxes, p=1)
    c_giou = -pairwise_giou(box_cxcywh_to_xyxy(gt_boxes), box_cxcywh_to_xyxy(boxes))
    return (
        weights.match_class * c_cls[None, :]
        + weights.match_box_l1 * c_l1
        + weights.match_box_giou * c_giou
    )


def match_cost(pred_logit: float, pred_box, gt_box, weights: LossWeights) -> float:
    """Cost of pairing one prediction with one ground truth."""
    c = cost_matrix(
        torch.as_tensor([pred_logit], dtype=torch.float64),
        torch.as_tensor(np.asarray(pred_box, dtype=np.float64)).reshape(1, 4),
        torch.as_tensor(np.asarray(gt_box, dtype=np.float64)).reshape(1, 4),
        weights,
    )
    return float(c[0, 0])


def solve_assignment(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective assignment of every row (ground truth) to a column (slot)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    m, n = cost.shape
    if m == 0:
        return MatchAssignment([], 0.0)
    if m > n:
        raise ValueError(f"{m} ground truths cannot be matched to {n} predictions")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return MatchAssignment(pairs, float(sum(cost[r, c] for r, c in pairs)))


@torch.no_grad()
def hungarian_match(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_boxes: torch.Tensor,
    weights: LossWeights,
) -> MatchAssignment:
    """Match one image's ``N`` predictions against its ``M <= N`` ground truths."""
    if gt_boxes.shape[0] == 0:
        return MatchAssignment([], 0.0)
    cost = cost_matrix(logits.double(), boxes.double(), gt_boxes.double(), weights)
    return solve_assignment(cost.cpu().numpy())
