"""Multi-scale deformable attention over a flattened feature pyramid."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class EncoderMemory:
    """Flattened multi-level features plus the metadata needed to put tokens back on their grids.

    ``tokens`` is ``(B, L, C)``. ``positions`` holds the normalized ``(x, y)``
    center of each token and ``level_ids`` its pyramid level; both are ``(L, ...)``
    and shared across the batch. Tokens may come in any order as long as the
    metadata is permuted with them.
    """

    tokens: torch.Tensor
    positions: torch.Tensor
    level_ids: torch.Tensor
    level_shapes: list[tuple[int, int]]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: torch.Tensor) -> "EncoderMemory":
        return replace(self, tokens=tokens)

    def grid_index(self) -> torch.Tensor:
        """Index of each token inside the level-major concatenation of all grids."""
        shapes = torch.as_tensor(self.level_shapes, dtype=torch.long, device=self.tokens.device)
        areas = shapes[:, 0] * shapes[:, 1]
        starts = torch.cat([areas.new_zeros(1), areas.cumsum(0)[:-1]])
        hw = shapes[self.level_ids]
        col = (self.positions[:, 0] * hw[:, 1]).floor().long().clamp_(min=0)
        row = (self.positions[:, 1] * hw[:, 0]).floor().long().clamp_(min=0)
        col = torch.minimum(col, hw[:, 1] - 1)
        row = torch.minimum(row, hw[:, 0] - 1)
        return starts[self.level_ids] + row * hw[:, 1] + col

    def level_maps(self, values: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Scatter ``(B, L, D)`` token values back into per-level ``(B, D, H, W)`` maps."""
        values = self.tokens if values is None else values
        b, length, d = values.shape
        total = sum(h * w for h, w in self.level_shapes)
        if length != total:
            raise ValueError(f"memory has {length} tokens but level shapes cover {total}")
        grid = values.new_zeros(b, total, d).index_copy(1, self.grid_index(), values)
        maps = []
        start = 0
        for h, w in self.level_shapes:
            maps.append(grid[:, start:start + h * w].transpose(1, 2).reshape(b, d, h, w))
            start += h * w
        return maps


def token_positions(level_shapes: list[tuple[int, int]], device=None, dtype=torch.float32):
    """Normalized centers ``((j + .5) / W, (i + .5) / H)`` and level ids, level-major row-major."""
    positions, levels = [], []
    for lvl, (h, w) in enumerate(level_shapes):
        ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        positions.append(torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1))
        levels.append(torch.full((h * w,), lvl, dtype=torch.long, device=device))
    return torch.cat(positions), torch.cat(levels)


def bilinear_sample(value_map: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``(B, D, H, W)`` at normalized ``(B, K, 2)`` points; zero outside the map. Returns ``(B, K, D)``."""
    grid = (2 * points - 1).unsqueeze(2)
    out = F.grid_sample(value_map, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.squeeze(-1).transpose(1, 2)


def deformable_sample(
    value_maps: list[torch.Tensor],
    locations: torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    """Weighted sum of bilinear samples.

    value_maps: per level ``(B * heads, dh, H_l, W_l)``.
    locations: ``(B, Q, heads, levels, points, 2)`` normalized.
    weights: ``(B, Q, heads, levels, points)``.
    Returns ``(B, Q, heads * dh)``.
    """
    b, q, heads, levels, points, _ = locations.shape
    grids = (2 * locations - 1).transpose(1, 2)
    out = None
    for lvl, vmap in enumerate(value_maps):
        grid = grids[:, :, :, lvl].reshape(b * heads, q * points, 1, 2)
        # (B*heads, dh, Q*points, 1)
        sampled = F.grid_sample(vmap, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        wl = weights[:, :, :, lvl].transpose(1, 2).reshape(b * heads, 1, q, points)
        part = (sampled.view(b * heads, -1, q, points) * wl).sum(-1)
        out = part if out is None else out + part
    dh = out.shape[1]
    return out.view(b, heads * dh, q).transpose(1, 2)


class MultiScaleDeformableAttention(nn.Module):
    def __init__(self, dim: int = 64, num_heads: int = 4, num_levels: int = 4, num_points: int = 4):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.sampling_offsets = nn.Linear(dim, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2.0 * math.pi / self.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for i in range(self.num_points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.view(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def forward(
        self,
        query: torch.Tensor,
        reference: torch.Tensor,
        memory: EncoderMemory,
        value: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        """Attend from ``(B, Q, C)`` queries at ``(B, Q, 2 | 4)`` references into ``memory``.

        With 4-d (box) references the offsets are scaled by half the box size,
        with 2-d references by one cell of each level.
        """
        b, q, _ = query.shape
        if len(memory.level_shapes) != self.num_levels:
            raise ValueError(f"expected {self.num_levels} levels, memory has {len(memory.level_shapes)}")
        value = memory.tokens if value is None else value
        v = self.value_proj(value)
        heads, dh = self.num_heads, self.dim // self.num_heads
        maps = [m.reshape(b * heads, dh, *m.shape[-2:]) for m in memory.level_maps(v)]

        offsets = self.sampling_offsets(query).view(b, q, heads, self.num_levels, self.num_points, 2)
        logits = self.attention_weights(query).view(b, q, heads, self.num_levels * self.num_points)
        weights = logits.softmax(-1).view(b, q, heads, self.num_levels, self.num_points)

        if reference.shape[-1] == 2:
            shapes = torch.as_tensor(memory.level_shapes, dtype=query.dtype, device=query.device)
            normalizer = torch.stack([shapes[:, 1], shapes[:, 0]], -1)
            locations = reference[:, :, None, None, None, :] + offsets / normalizer[None, None, None, :, None, :]
        elif reference.shape[-1] == 4:
            locations = (
                reference[:, :, None, None, None, :2]
                + offsets / self.num_points * reference[:, :, None, None, None, 2:] * 0.5
            )
        else:
            raise ValueError(f"reference must have 2 or 4 coordinates, got {reference.shape[-1]}")

        out = self.output_proj(deformable_sample(maps, locations, weights))
        if return_weights:
            return out, weights, locations
        return out
