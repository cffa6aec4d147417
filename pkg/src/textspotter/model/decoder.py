"""Task-aware decoder.

Each layer runs, in order: vision-language communication, intra-group
self-attention (tokens of one instance), inter-group self-attention (one token
index across instances), deformable cross-attention into the encoder memory
and a feed-forward block. Queries are ``(B, N, T + 1, C)`` throughout with the
detection query at token 0.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
from torch import nn

from ..geometry import NUM_POLYGON_POINTS, reconstruct_polygon
from .attention import MultiHeadAttention
from .deformable import EncoderMemory, MultiScaleDeformableAttention
from .encoder import FeedForward
from .query_init import inverse_sigmoid


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [out_dim]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def language_conversion(G: torch.Tensor, R: torch.Tensor, W1: nn.Linear, W2: nn.Linear):
    """Character distributions of the recognition queries mapped back to feature space.

    Returns ``(L, P)``: ``L`` is ``(..., T + 1, C)`` with ``G`` at token 0, ``P``
    the per-token softmax over character classes.
    """
    P = W1(R).softmax(dim=-1)
    L = torch.cat([G.unsqueeze(-2), W2(P)], dim=-2)
    return L, P


def vlc_mask(length: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Additive mask with ``-inf`` on the diagonal and 0 elsewhere."""
    mask = torch.zeros(length, length, dtype=dtype, device=device)
    mask.fill_diagonal_(float("-inf"))
    return mask


class VisionLanguageCommunication(nn.Module):
    def __init__(self, dim: int, heads: int, num_classes: int):
        super().__init__()
        self.W1 = nn.Linear(dim, num_classes, bias=False)
        self.W2 = nn.Linear(num_classes, dim, bias=False)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, S: torch.Tensor, token_pe: torch.Tensor, return_weights: bool = False):
        """``S`` is ``(B, N, T + 1, C)``; ``token_pe`` is ``(T + 1, C)``. Attention stays inside each instance."""
        b, n, t1, c = S.shape
        L, _ = language_conversion(S[:, :, 0], S[:, :, 1:], self.W1, self.W2)
        q = (S + token_pe).reshape(b * n, t1, c)
        k = (L + token_pe).reshape(b * n, t1, c)
        mask = vlc_mask(t1, dtype=S.dtype, device=S.device)
        out = self.attn(q, k, L.reshape(b * n, t1, c), mask=mask, return_weights=return_weights)
        if return_weights:
            out, weights = out
        S = self.norm(S + out.view(b, n, t1, c))
        if return_weights:
            return S, weights.view(b, n, *weights.shape[1:])
        return S


class IntraGroupAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, S: torch.Tensor, pos: torch.Tensor, return_weights: bool = False):
        b, n, t1, c = S.shape
        x = (S + pos).reshape(b * n, t1, c)
        out = self.attn(x, x, S.reshape(b * n, t1, c), return_weights=return_weights)
        if return_weights:
            out, weights = out
        S = self.norm(S + out.view(b, n, t1, c))
        return (S, weights) if return_weights else S


class InterGroupAttention(nn.Module):
    """Self-attention across instances, separately for every token index."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, S: torch.Tensor, pos: torch.Tensor, mask: torch.Tensor | None = None):
        b, n, t1, c = S.shape
        x = (S + pos).transpose(1, 2).reshape(b * t1, n, c)
        v = S.transpose(1, 2).reshape(b * t1, n, c)
        out = self.attn(x, x, v, mask=mask)
        out = out.view(b, t1, n, c).transpose(1, 2)
        return self.norm(S + out)


def box_sine_embedding(boxes: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of each of the 4 box coordinates, ``dim // 2`` features each."""
    half = dim // 2
    idx = torch.arange(half, dtype=boxes.dtype, device=boxes.device)
    freqs = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / half)
    x = boxes[..., None] * (2 * math.pi) / freqs
    x = torch.stack([x[..., 0::2].sin(), x[..., 1::2].cos()], dim=-1).flatten(-2)
    return x.flatten(-2)


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, levels, points, ffn_dim, num_classes, use_vlc=True):
        super().__init__()
        self.vlc = VisionLanguageCommunication(dim, heads, num_classes) if use_vlc else None
        self.intra = IntraGroupAttention(dim, heads)
        self.inter = InterGroupAttention(dim, heads)
        self.cross = MultiScaleDeformableAttention(dim, heads, levels, points)
        self.cross_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.ffn_norm = nn.LayerNorm(dim)

    def forward(self, S, instance_pos, token_pe, reference, memory: EncoderMemory, instance_mask=None):
        b, n, t1, c = S.shape
        if self.vlc is not None:
            S = self.vlc(S, token_pe)
        pos = instance_pos.unsqueeze(2) + token_pe
        S = self.intra(S, pos)
        S = self.inter(S, pos, instance_mask)
        q = (S + pos).reshape(b, n * t1, c)
        ref = reference.unsqueeze(2).expand(b, n, t1, 4).reshape(b, n * t1, 4)
        out = self.cross(q, ref, memory)
        S = self.cross_norm(S + out.view(b, n, t1, c))
        return self.ffn_norm(S + self.ffn(S))


class PredictionHeads(nn.Module):
    def __init__(self, dim: int, num_char_logits: int):
        super().__init__()
        self.class_head = nn.Linear(dim, 1)
        self.box_head = MLP(dim, dim, 4, 3)
        self.polygon_head = MLP(dim, dim, 2 * NUM_POLYGON_POINTS, 3)
        self.char_head = nn.Linear(dim, num_char_logits)
        nn.init.constant_(self.class_head.bias, -math.log((1 - 0.01) / 0.01))
        for mlp in (self.box_head, self.polygon_head):
            nn.init.constant_(mlp.layers[-1].weight, 0.0)
            nn.init.constant_(mlp.layers[-1].bias, 0.0)

    def forward(self, S: torch.Tensor, reference: torch.Tensor) -> dict[str, torch.Tensor]:
        det = S[:, :, 0]
        boxes = (self.box_head(det) + inverse_sigmoid(reference)).sigmoid()
        offsets = self.polygon_head(det).view(*det.shape[:-1], NUM_POLYGON_POINTS, 2)
        return {
            "logits": self.class_head(det).squeeze(-1),
            "boxes": boxes,
            "polygons": reconstruct_polygon(boxes, offsets),
            "chars": self.char_head(S[:, :, 1:]),
        }


@dataclass
class DecoderOutput:
    queries: torch.Tensor
    layers: list[dict[str, torch.Tensor]]


class TaskAwareDecoder(nn.Module):
    def __init__(
        self,
        dim=64,
        heads=4,
        levels=4,
        points=4,
        ffn_dim=256,
        num_layers=6,
        max_len=25,
        num_classes=36,
        use_vlc=True,
    ):
        super().__init__()
        self.dim = dim
        self.token_pe = nn.Embedding(max_len + 1, dim)
        self.ref_point_head = MLP(2 * dim, dim, dim, 2)
        layer = DecoderLayer(dim, heads, levels, points, ffn_dim, num_classes, use_vlc)
        self.layers = nn.ModuleList(copy.deepcopy(layer) for _ in range(num_layers))
        heads_module = PredictionHeads(dim, num_classes + 2)
        self.heads = nn.ModuleList(copy.deepcopy(heads_module) for _ in range(num_layers))

    def forward(self, S, reference, memory: EncoderMemory, instance_mask=None) -> DecoderOutput:
        """Run every layer with iterative box refinement; references are detached between layers."""
        token_pe = self.token_pe.weight.to(S.dtype)
        outputs = []
        for layer, heads in zip(self.layers, self.heads):
            instance_pos = self.ref_point_head(box_sine_embedding(reference, self.dim))
            S = layer(S, instance_pos, token_pe, reference, memory, instance_mask)
            pred = heads(S, reference)
            outputs.append(pred)
            reference = pred["boxes"].detach()
        return DecoderOutput(S, outputs)
