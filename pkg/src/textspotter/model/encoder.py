from __future__ import annotations

import math

import torch
from torch import nn

from .deformable import EncoderMemory, MultiScaleDeformableAttention


def sine_position_embedding(positions: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed sinusoidal embedding of normalized ``(..., 2)`` points; x and y halves concatenated."""
    half = dim // 2
    scale = 2 * math.pi
    idx = torch.arange(half, dtype=positions.dtype, device=positions.device)
    freqs = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / half)
    x = positions[..., 0, None] * scale / freqs
    y = positions[..., 1, None] * scale / freqs
    x = torch.stack([x[..., 0::2].sin(), x[..., 1::2].cos()], dim=-1).flatten(-2)
    y = torch.stack([y[..., 0::2].sin(), y[..., 1::2].cos()], dim=-1).flatten(-2)
    return torch.cat([x, y], dim=-1)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm deformable self-attention followed by a feed-forward block."""

    def __init__(self, dim: int, heads: int, levels: int, points: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiScaleDeformableAttention(dim, heads, levels, points)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x: torch.Tensor, pos: torch.Tensor, memory: EncoderMemory) -> torch.Tensor:
        b = x.shape[0]
        h = self.norm1(x)
        ref = memory.positions.unsqueeze(0).expand(b, -1, -1)
        x = x + self.attn(h + pos, ref, memory, value=h)
        return x + self.ffn(self.norm2(x))


class DeformableEncoder(nn.Module):
    def __init__(self, dim=64, heads=4, levels=4, points=4, ffn_dim=256, num_layers=6):
        super().__init__()
        self.dim = dim
        self.level_embed = nn.Parameter(torch.zeros(levels, dim))
        nn.init.normal_(self.level_embed, std=0.02)
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, levels, points, ffn_dim) for _ in range(num_layers))

    def position_encoding(self, memory: EncoderMemory) -> torch.Tensor:
        pe = sine_position_embedding(memory.positions, self.dim) + self.level_embed[memory.level_ids]
        return pe.unsqueeze(0).to(memory.tokens.dtype)

    def forward(self, memory: EncoderMemory) -> EncoderMemory:
        pos = self.position_encoding(memory)
        x = memory.tokens
        for layer in self.layers:
            x = layer(x, pos, memory.with_tokens(x))
        return memory.with_tokens(x)
