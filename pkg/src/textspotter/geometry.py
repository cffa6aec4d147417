"""Box and polygon helpers shared by the model, the losses and the evaluator.

Boxes are ``(cx, cy, w, h)`` in normalized image coordinates unless the name
says ``xyxy``. Polygons carry exactly :data:`NUM_POLYGON_POINTS` points: eight
along the top edge left to right, then eight along the bottom edge right to
left, forming a closed ring.
"""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import shapely
import torch
from shapely.geometry import Polygon

logger = logging.getLogger(__name__)

NUM_POLYGON_POINTS = 16


def box_cxcywh_to_xyxy(boxes):
    """Center form to corner form. Works on tuples, numpy arrays and tensors."""
    if isinstance(boxes, torch.Tensor):
        cx, cy, w, h = boxes.unbind(-1)
        return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    return tuple(out.tolist()) if out.ndim == 1 else out


def box_xyxy_to_cxcywh(boxes):
    if isinstance(boxes, torch.Tensor):
        x0, y0, x1, y1 = boxes.unbind(-1)
        return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)
    b = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)
    return tuple(out.tolist()) if out.ndim == 1 else out


def box_convert(box: Sequence[float]) -> tuple[float, float, float, float]:
    """Convert one ``(cx, cy, w, h)`` box to ``(x0, y0, x1, y1)``."""
    cx, cy, w, h = (float(v) for v in box)
    if w < 0 or h < 0:
        raise ValueError(f"box has negative size: {box}")
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def giou(a: Sequence[float], b: Sequence[float], *, with_flag: bool = False):
    """Generalized IoU of two corner boxes.

    Two zero-area boxes give 0.0 instead of NaN; pass ``with_flag=True`` to get
    ``(value, degenerate)`` so callers can tell that case apart.
    """
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    iw = max(min(ax1, bx1) - max(ax0, bx0), 0.0)
    ih = max(min(ay1, by1) - max(ay0, by0), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    if union <= 0.0 or enclose <= 0.0:
        logger.debug("giou on degenerate boxes %s %s", a, b)
        return (0.0, True) if with_flag else 0.0
    value = inter / union - (enclose - union) / enclose
    return (value, False) if with_flag else value


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def pairwise_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """IoU matrix and union matrix of two sets of corner boxes."""
    area1 = box_area(boxes1)
    area2 = box_area(boxes2)
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    safe_union = torch.where(union > 0, union, torch.ones_like(union))
    iou = torch.where(union > 0, inter / safe_union, torch.zeros_like(union))
    return iou, union


def pairwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Differentiable GIoU matrix between corner boxes (0 where both are degenerate)."""
    iou, union = pairwise_iou(boxes1, boxes2)
    lt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    enclose = wh[..., 0] * wh[..., 1]
    ok = (union > 0) & (enclose > 0)
    safe_enclose = torch.where(ok, enclose, torch.ones_like(enclose))
    value = iou - (safe_enclose - union) / safe_enclose
    return torch.where(ok, value, torch.zeros_like(value))


def elementwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """GIoU between row-aligned corner boxes, shape ``(K,)``."""
    area1 = box_area(boxes1)
    area2 = box_area(boxes2)
    lt = torch.max(boxes1[:, :2], boxes2[:, :2])
    rb = torch.min(boxes1[:, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area1 + area2 - inter
    lt_c = torch.min(boxes1[:, :2], boxes2[:, :2])
    rb_c = torch.max(boxes1[:, 2:], boxes2[:, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[:, 0] * wh_c[:, 1]
    ok = (union > 0) & (enclose > 0)
    safe_union = torch.where(ok, union, torch.ones_like(union))
    safe_enclose = torch.where(ok, enclose, torch.ones_like(enclose))
    value = inter / safe_union - (safe_enclose - union) / safe_enclose
    return torch.where(ok, value, torch.zeros_like(value))


def reconstruct_polygon(proposal, offsets):
    """Add per-point offsets to the proposal center.

    ``proposal`` is ``(..., 4)`` in ``cxcywh`` and ``offsets`` is ``(..., 16, 2)``
    (or a flat 32 vector per proposal). No clamping is applied.
    """
    if isinstance(offsets, torch.Tensor):
        if offsets.shape[-1] == 2 * NUM_POLYGON_POINTS:
            offsets = offsets.reshape(*offsets.shape[:-1], NUM_POLYGON_POINTS, 2)
        if offsets.shape[-2:] != (NUM_POLYGON_POINTS, 2):
            raise ValueError(f"expected {NUM_POLYGON_POINTS} offset pairs, got shape {tuple(offsets.shape)}")
        return proposal[..., None, :2] + offsets
    arr = np.asarray(offsets, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2 * NUM_POLYGON_POINTS:
        arr = arr.reshape(NUM_POLYGON_POINTS, 2)
    if arr.shape != (NUM_POLYGON_POINTS, 2):
        raise ValueError(f"expected {NUM_POLYGON_POINTS} offset pairs, got shape {arr.shape}")
    center = np.asarray(proposal, dtype=np.float64)[:2]
    return center[None, :] + arr


def polygon_offsets(proposal, polygon):
    """Inverse of :func:`reconstruct_polygon`: offsets of each point from the proposal center."""
    if isinstance(polygon, torch.Tensor):
        if polygon.shape[-2:] != (NUM_POLYGON_POINTS, 2):
            raise ValueError(f"expected {NUM_POLYGON_POINTS} points, got shape {tuple(polygon.shape)}")
        return polygon - proposal[..., None, :2]
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.shape != (NUM_POLYGON_POINTS, 2):
        raise ValueError(f"expected {NUM_POLYGON_POINTS} points, got shape {pts.shape}")
    return pts - np.asarray(proposal, dtype=np.float64)[None, :2]


def polygon_bounds(polygon) -> tuple[float, float, float, float]:
    """Axis-aligned hull of a polygon as a ``cxcywh`` box."""
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def polygon_area(polygon) -> float:
    """Absolute shoelace area."""
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _as_shape(polygon) -> Polygon:
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("polygon has non-finite coordinates")
    poly = Polygon(pts)
    if not poly.is_valid:
        logger.warning("self-intersecting polygon replaced by its convex hull")
        poly = shapely.convex_hull(shapely.MultiPoint(pts))
        if not isinstance(poly, Polygon):
            return Polygon()
    return poly


def polygon_iou(a, b) -> float:
    """Area IoU of two polygons given as ``(K, 2)`` point lists (or flat arrays)."""
    pa, pb = _as_shape(a), _as_shape(b)
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    if union <= 0.0 or math.isclose(union, 0.0, abs_tol=1e-15):
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))
