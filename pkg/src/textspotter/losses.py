"""Training objective: focal classification, l1 + GIoU boxes, l1 polygons and
per-character cross-entropy, summed over decoder layers, denoising groups and
the encoder proposal stage."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import LossWeights
from .geometry import box_cxcywh_to_xyxy, elementwise_giou
from .matching import MatchAssignment, hungarian_match


def sigmoid_focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0):
    """Element-wise focal loss on logits."""
    prob = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def box_l1_loss(pred, target):
    return (pred - target).abs().sum(-1)


def giou_loss(pred, target):
    """``1 - giou`` per row for cxcywh boxes."""
    return 1 - elementwise_giou(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(target))


def polygon_l1_loss(pred, target):
    """Mean absolute error over the 32 coordinates of each polygon."""
    return (pred - target).abs().flatten(-2).mean(-1)


def recognition_loss(logits, targets, pad_id: int):
    """Cross-entropy per instance, averaged over non-PAD positions. ``logits`` ``(K, T, V)``."""
    ce = F.cross_entropy(logits.flatten(0, 1), targets.flatten(), reduction="none").view(targets.shape)
    keep = (targets != pad_id).to(ce.dtype)
    return (ce * keep).sum(-1) / keep.sum(-1).clamp(min=1)


@dataclass
class Targets:
    """Ground truth of one image as tensors (normalized coordinates)."""

    boxes: torch.Tensor  # (M, 4) cxcywh
    polygons: torch.Tensor  # (M, 16, 2)
    texts: torch.Tensor  # (M, T) ids


COMPONENTS = ("classification", "box_l1", "box_giou", "polygon", "recognition")


@dataclass
class LossBreakdown:
    """Weighted loss terms keyed ``<branch>/<component>``; ``total`` is their sum."""

    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    grad_norm: float | None = None  # pre-clipping norm, set after an optimizer step

    @property
    def total(self) -> torch.Tensor:
        return sum(self.terms.values())

    def component(self, name: str) -> torch.Tensor:
        return sum(v for k, v in self.terms.items() if k.endswith("/" + name))

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        for c in COMPONENTS:
            vals = [v for k, v in out.items() if k.endswith("/" + c)]
            if vals:
                out[c] = sum(vals)
        out["total"] = float(self.total.detach())
        return out


def layer_losses(
    pred: dict[str, torch.Tensor],
    targets: list[Targets],
    assignments: list[MatchAssignment],
    weights: LossWeights,
    pad_id: int,
    num_instances: float,
    valid: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Weighted loss terms of one decoder layer.

    Focal loss covers every slot (``valid`` may exclude padding slots); the
    other terms cover matched slots only. Everything is divided by the number
    of ground-truth instances in the batch.
    """
    logits = pred["logits"]
    cls_target = torch.zeros_like(logits)
    b_idx, s_idx, g_box, g_poly, g_txt = [], [], [], [], []
    for b, (tgt, asg) in enumerate(zip(targets, assignments)):
        if not asg.pairs:
            continue
        gi = torch.as_tensor(asg.gt_indices, dtype=torch.long)
        si = torch.as_tensor(asg.pred_slots, dtype=torch.long)
        cls_target[b, si] = 1.0
        b_idx.append(torch.full_like(si, b))
        s_idx.append(si)
        g_box.append(tgt.boxes[gi])
        g_poly.append(tgt.polygons[gi])
        g_txt.append(tgt.texts[gi])
    focal = sigmoid_focal_loss(logits, cls_target, weights.focal_alpha, weights.focal_gamma)
    if valid is not None:
        focal = focal * valid.to(focal.dtype)
    terms = {"classification": weights.classification * focal.sum() / num_instances}
    if b_idx:
        bi, si = torch.cat(b_idx), torch.cat(s_idx)
        gb, gp, gt = torch.cat(g_box), torch.cat(g_poly), torch.cat(g_txt)
        boxes = pred["boxes"][bi, si]
        terms["box_l1"] = weights.box * weights.box_l1 * box_l1_loss(boxes, gb).sum() / num_instances
        terms["box_giou"] = weights.box * weights.box_giou * giou_loss(boxes, gb).sum() / num_instances
        terms["polygon"] = weights.polygon * polygon_l1_loss(pred["polygons"][bi, si], gp).sum() / num_instances
        terms["recognition"] = (
            weights.recognition * recognition_loss(pred["chars"][bi, si], gt, pad_id).sum() / num_instances
        )
    else:
        zero = logits.sum() * 0.0
        for name in COMPONENTS[1:]:
            terms[name] = zero
    return terms


def match_layer(pred: dict[str, torch.Tensor], targets: list[Targets], weights: LossWeights):
    return [
        hungarian_match(pred["logits"][b], pred["boxes"][b], tgt.boxes, weights)
        for b, tgt in enumerate(targets)
    ]


def encoder_losses(enc: dict, memory, targets: list[Targets], weights: LossWeights, num_instances: float):
    """Token scores against "token center inside a GT box"; selected proposals matched and regressed."""
    scores = enc["scores"]
    pos = memory.positions
    labels = torch.zeros_like(scores)
    for b, tgt in enumerate(targets):
        if tgt.boxes.shape[0] == 0:
            continue
        xyxy = box_cxcywh_to_xyxy(tgt.boxes).to(pos.dtype)
        inside = (
            (pos[:, None, 0] >= xyxy[None, :, 0])
            & (pos[:, None, 0] <= xyxy[None, :, 2])
            & (pos[:, None, 1] >= xyxy[None, :, 1])
            & (pos[:, None, 1] <= xyxy[None, :, 3])
        )
        labels[b] = inside.any(-1).to(scores.dtype)
    focal = sigmoid_focal_loss(scores, labels, weights.focal_alpha, weights.focal_gamma)
    terms = {"classification": weights.encoder * weights.classification * focal.sum() / num_instances}
    proposals = enc["proposals"]
    sel_logits = scores.gather(1, enc["indices"])
    l1, gi = [], []
    for b, tgt in enumerate(targets):
        asg = hungarian_match(sel_logits[b], proposals[b], tgt.boxes, weights)
        if not asg.pairs:
            continue
        p = proposals[b, asg.pred_slots]
        g = tgt.boxes[asg.gt_indices]
        l1.append(box_l1_loss(p, g))
        gi.append(giou_loss(p, g))
    if l1:
        terms["box_l1"] = weights.encoder * weights.box_l1 * torch.cat(l1).sum() / num_instances
        terms["box_giou"] = weights.encoder * weights.box_giou * torch.cat(gi).sum() / num_instances
    return terms


def spotting_loss(outputs: dict, targets: list[Targets], weights: LossWeights, pad_id: int) -> LossBreakdown:
    """Full objective for one batch of model outputs.

    Matching layers are Hungarian-matched layer by layer; denoising layers use
    the known slot-to-target assignment.
    """
    num_instances = max(float(sum(t.boxes.shape[0] for t in targets)), 1.0)
    breakdown = LossBreakdown()
    for i, pred in enumerate(outputs["layers"]):
        asg = match_layer(pred, targets, weights)
        for k, v in layer_losses(pred, targets, asg, weights, pad_id, num_instances).items():
            breakdown.terms[f"layer{i}/{k}"] = v
    dn = outputs.get("dn")
    if dn is not None:
        known = [MatchAssignment(dn.known_assignment(b)) for b in range(len(targets))]
        for i, pred in enumerate(outputs["dn_layers"]):
            terms = layer_losses(pred, targets, known, weights, pad_id, num_instances * dn.groups, dn.valid)
            for k, v in terms.items():
                breakdown.terms[f"dn{i}/{k}"] = v
    if "enc" in outputs and "memory" in outputs:
        for k, v in encoder_losses(outputs["enc"], outputs["memory"], targets, weights, num_instances).items():
            breakdown.terms[f"enc/{k}"] = v
    return breakdown
