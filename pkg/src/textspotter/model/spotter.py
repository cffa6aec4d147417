from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..config import DenoisingConfig, ModelConfig
from ..data.charset import Charset
from ..denoising import DenoisingBatch, build_denoising_batch
from .backbone import PYRAMID_STRIDES, Backbone
from .decoder import MLP, TaskAwareDecoder
from .encoder import DeformableEncoder
from .query_init import QueryInitializer, TaskAwareQueries


class TextSpotter(nn.Module):
    """Backbone, deformable encoder, task-aware query initialization and decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.charset = Charset(config.charset)
        c = config.dim
        levels = len(PYRAMID_STRIDES)
        self.backbone = Backbone(tuple(config.backbone_channels), c, config.stem_channels)
        self.encoder = DeformableEncoder(c, config.heads, levels, config.points, config.ffn_dim, config.encoder_layers)
        self.query_init = QueryInitializer(
            c, config.num_queries, config.max_len, config.recognition_rows, config.use_taqi
        )
        self.decoder = TaskAwareDecoder(
            c,
            config.heads,
            levels,
            config.points,
            config.ffn_dim,
            config.decoder_layers,
            config.max_len,
            self.charset.num_classes,
            config.use_vlc,
        )
        self.dn_box_embed = MLP(4, c, c, 2)

    def encode(self, images: torch.Tensor):
        pyramid = self.backbone(images)
        return self.encoder(pyramid.flatten())

    def denoising_queries(self, dn: DenoisingBatch, memory, matching: TaskAwareQueries) -> TaskAwareQueries:
        detection = self.query_init.query_norm(self.dn_box_embed(dn.boxes))
        if self.config.use_taqi:
            recognition = self.query_init.rec_norm(self.query_init.init_recognition_queries(memory, dn.boxes))
        else:
            b, d = dn.boxes.shape[:2]
            recognition = matching.recognition[:, :1].expand(b, d, -1, -1)
        return TaskAwareQueries(detection, recognition, dn.boxes)

    def forward(
        self,
        images: torch.Tensor,
        gt_boxes: list[np.ndarray] | None = None,
        denoising: DenoisingConfig | None = None,
        rng: np.random.Generator | None = None,
    ) -> dict:
        """Run the full model.

        Passing ``gt_boxes`` (normalized cxcywh per image), a denoising config
        and an RNG attaches denoising groups; their predictions come back under
        ``"dn_layers"`` and never influence the matching predictions.
        """
        memory = self.encode(images)
        queries, enc = self.query_init(memory)
        out = self.decoder(queries.stacked, queries.proposals, memory)
        result = {"layers": out.layers, "enc": enc, "memory": memory, "queries": out.queries}
        if gt_boxes is None or denoising is None or not denoising.enabled:
            return result
        if rng is None:
            raise ValueError("denoising needs an explicit rng")
        n = queries.stacked.shape[1]
        dn, mask = build_denoising_batch(gt_boxes, rng, denoising, n, images.device, memory.tokens.dtype)
        if dn is None:
            return result
        # The isolation mask blocks every matching<->denoising pair, so the
        # matching block of the joint masked attention is exactly the plain
        # matching pass. Running the blocks separately makes that hold
        # bit-for-bit (a joint pass changes matmul shapes and thus rounding).
        d = dn.num_queries
        dq = self.denoising_queries(dn, memory, queries)
        dn_out = self.decoder(dq.stacked, dq.proposals, memory, mask[:d, :d])
        result.update(dn_layers=dn_out.layers, dn=dn, dn_mask=mask)
        return result
