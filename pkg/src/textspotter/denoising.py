"""Task-aware denoising groups.

Ground-truth boxes are jittered (center shift plus size scaling) into noise
boxes. Each noise box becomes a detection query through a small MLP and gets
recognition queries sampled from inside it, exactly like the matching
queries. Conceptually the groups are prepended to the matching queries along
the instance axis, with an attention mask that keeps the groups and the
matching queries from seeing each other; the model runs the two blocks as
separate decoder passes, which that mask makes equivalent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import DenoisingConfig


def make_noise_boxes(
    gt_boxes: np.ndarray,
    rng: np.random.Generator,
    shift_ratio: float,
    scale_ratio: float,
    groups: int,
) -> np.ndarray:
    """Jittered copies of ``(M, 4)`` cxcywh boxes, shape ``(groups, M, 4)``, clamped to [0, 1]."""
    if not (0 <= shift_ratio < 1 and 0 <= scale_ratio < 1):
        raise ValueError("shift_ratio and scale_ratio must lie in [0, 1)")
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    m = boxes.shape[0]
    shift = rng.uniform(-1.0, 1.0, size=(groups, m, 2))
    scale = rng.uniform(-1.0, 1.0, size=(groups, m, 2))
    out = np.repeat(boxes[None], groups, axis=0)
    wh = boxes[None, :, 2:]
    out[..., :2] = out[..., :2] + shift * shift_ratio * wh / 2
    out[..., 2:] = out[..., 2:] * (1.0 + scale * scale_ratio)
    return np.clip(out, 0.0, 1.0)


@dataclass
class DenoisingBatch:
    """Noise queries for a padded batch plus the bookkeeping the loss needs.

    ``boxes`` is ``(B, G * M, 4)`` where ``M`` is the largest GT count in the
    batch; ``valid`` marks real (non-padding) slots; ``target_index`` maps each
    slot to its GT index (or -1).
    """

    boxes: torch.Tensor
    valid: torch.Tensor
    target_index: torch.Tensor
    groups: int
    group_size: int

    @property
    def num_queries(self) -> int:
        return self.groups * self.group_size

    def known_assignment(self, image: int) -> list[tuple[int, int]]:
        """``(gt_index, slot)`` pairs of one image for all groups."""
        idx = self.target_index[image]
        return [(int(idx[s]), s) for s in range(idx.shape[0]) if idx[s] >= 0]


def isolation_mask(num_matching: int, groups: int, group_size: int, device=None) -> torch.Tensor:
    """Boolean ``(D + N, D + N)`` mask over instances (``True`` blocks), denoising slots first.

    Matching queries see only matching queries; each denoising group sees only itself.
    """
    num_dn = groups * group_size
    total = num_dn + num_matching
    mask = torch.zeros(total, total, dtype=torch.bool, device=device)
    if num_dn == 0:
        return mask
    mask[num_dn:, :num_dn] = True
    for g in range(groups):
        lo, hi = g * group_size, (g + 1) * group_size
        mask[lo:hi, :lo] = True
        mask[lo:hi, hi:] = True
    return mask


def build_denoising_batch(
    gt_boxes: list[np.ndarray],
    rng: np.random.Generator,
    config: DenoisingConfig,
    num_matching: int,
    device=None,
    dtype=torch.float32,
) -> tuple[DenoisingBatch | None, torch.Tensor]:
    """Noise boxes for every image of a batch and the instance isolation mask.

    Returns ``(None, all-permitted mask)`` when no image has a GT instance or
    denoising is disabled.
    """
    counts = [len(b) for b in gt_boxes]
    m = max(counts, default=0)
    if not config.enabled or m == 0 or config.groups == 0:
        return None, isolation_mask(num_matching, 0, 0, device)
    g = config.groups
    boxes = np.tile(np.array([0.5, 0.5, 0.1, 0.1]), (len(gt_boxes), g, m, 1))
    target_index = np.full((len(gt_boxes), g, m), -1, dtype=np.int64)
    for i, gts in enumerate(gt_boxes):
        if len(gts) == 0:
            continue
        boxes[i, :, : len(gts)] = make_noise_boxes(gts, rng, config.shift_ratio, config.scale_ratio, g)
        target_index[i, :, : len(gts)] = np.arange(len(gts))
    batch = DenoisingBatch(
        boxes=torch.as_tensor(boxes.reshape(len(gt_boxes), g * m, 4), dtype=dtype, device=device),
        valid=torch.as_tensor(target_index.reshape(len(gt_boxes), g * m) >= 0, device=device),
        target_index=torch.as_tensor(target_index.reshape(len(gt_boxes), g * m), device=device),
        groups=g,
        group_size=m,
    )
    return batch, isolation_mask(num_matching, g, m, device)
