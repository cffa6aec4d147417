"""Task-aware query initialization: top-scoring encoder tokens seed the detection
queries and proposals; features sampled inside each proposal seed the recognition queries."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .deformable import EncoderMemory, bilinear_sample


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


@dataclass
class TaskAwareQueries:
    detection: torch.Tensor  # (B, N, C)
    recognition: torch.Tensor  # (B, N, T, C)
    proposals: torch.Tensor  # (B, N, 4) cxcywh

    @property
    def stacked(self) -> torch.Tensor:
        """All queries as ``(B, N, T + 1, C)`` with the detection query at token 0."""
        return torch.cat([self.detection.unsqueeze(2), self.recognition], dim=2)

    @staticmethod
    def split(stacked: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return stacked[:, :, 0], stacked[:, :, 1:]


def select_topn(scores: torch.Tensor, n: int) -> torch.Tensor:
    """Indices of the ``n`` largest scores per row; equal scores keep token order."""
    if n > scores.shape[-1]:
        raise ValueError(f"cannot select {n} tokens out of {scores.shape[-1]}")
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :n]


def token_prior_boxes(memory: EncoderMemory, base_size: float = 0.05) -> torch.Tensor:
    """Per-token prior box: the token center with a square size doubling per level."""
    size = base_size * (2.0 ** memory.level_ids.to(memory.positions.dtype))
    return torch.cat([memory.positions, size[:, None], size[:, None]], dim=-1)


def sample_recognition_features(
    feature_map: torch.Tensor, boxes: torch.Tensor, length: int, rows: int
) -> torch.Tensor:
    """Sample a ``rows x length`` axis-aligned grid inside each box and average the rows.

    feature_map: ``(B, C, H, W)``; boxes: ``(B, N, 4)`` cxcywh. Returns ``(B, N, length, C)``.
    """
    b, n, _ = boxes.shape
    dtype, device = boxes.dtype, boxes.device
    fx = (torch.arange(length, dtype=dtype, device=device) + 0.5) / length - 0.5
    fy = (torch.arange(rows, dtype=dtype, device=device) + 0.5) / rows - 0.5
    cx, cy, w, h = boxes.unbind(-1)
    xs = cx[..., None, None] + fx[None, None, None, :] * w[..., None, None]
    ys = cy[..., None, None] + fy[None, None, :, None] * h[..., None, None]
    xs, ys = torch.broadcast_tensors(xs, ys)
    points = torch.stack([xs, ys], dim=-1).reshape(b, n * rows * length, 2)
    sampled = bilinear_sample(feature_map, points)
    return sampled.view(b, n, rows, length, -1).mean(dim=2)


class QueryInitializer(nn.Module):
    """Scores memory tokens, keeps the top ``num_queries`` and builds task-aware queries.

    With ``use_taqi=False`` the query contents come from learnable embeddings
    instead (proposals are still taken from the top-scoring tokens).
    """

    def __init__(self, dim: int, num_queries: int, max_len: int, rows: int = 4, use_taqi: bool = True):
        super().__init__()
        self.num_queries = num_queries
        self.max_len = max_len
        self.rows = rows
        self.use_taqi = use_taqi
        self.score_head = nn.Linear(dim, 1)
        self.box_head = nn.Linear(dim, 4)
        self.query_proj = nn.Linear(dim, dim)
        self.query_norm = nn.LayerNorm(dim)
        self.rec_norm = nn.LayerNorm(dim)
        nn.init.constant_(self.box_head.weight, 0.0)
        nn.init.constant_(self.box_head.bias, 0.0)
        nn.init.constant_(self.score_head.bias, -2.0)
        if not use_taqi:
            self.detection_embed = nn.Embedding(num_queries, dim)
            self.recognition_embed = nn.Embedding(max_len, dim)

    def score_memory(self, memory: EncoderMemory) -> torch.Tensor:
        return self.score_head(memory.tokens).squeeze(-1)

    def token_boxes(self, tokens: torch.Tensor, priors: torch.Tensor) -> torch.Tensor:
        return (inverse_sigmoid(priors) + self.box_head(tokens)).sigmoid()

    def init_recognition_queries(self, memory: EncoderMemory, boxes: torch.Tensor) -> torch.Tensor:
        """TAQI recognition queries sampled from the finest level; ``(B, N, T, C)``."""
        finest = memory.level_maps()[0]
        return sample_recognition_features(finest, boxes, self.max_len, self.rows)

    def forward(self, memory: EncoderMemory, num_queries: int | None = None):
        n = num_queries or self.num_queries
        scores = self.score_memory(memory)
        idx = select_topn(scores.detach(), n)
        b = scores.shape[0]
        batch = torch.arange(b, device=idx.device)[:, None]
        selected = memory.tokens[batch, idx]
        priors = token_prior_boxes(memory)[idx]
        proposals = self.token_boxes(selected, priors)
        ref = proposals.detach()
        if self.use_taqi:
            detection = self.query_norm(self.query_proj(selected))
            recognition = self.rec_norm(self.init_recognition_queries(memory, ref))
        else:
            detection = self.detection_embed.weight[:n].unsqueeze(0).expand(b, -1, -1)
            recognition = self.recognition_embed.weight[None, None].expand(b, n, -1, -1)
        queries = TaskAwareQueries(detection, recognition, ref)
        return queries, {"scores": scores, "indices": idx, "proposals": proposals}
