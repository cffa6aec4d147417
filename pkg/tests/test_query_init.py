import numpy as np
import pytest
import torch

from test_backbone_encoder import bilinear_oracle, make_memory
from textspotter.model.deformable import EncoderMemory, token_positions
from textspotter.model.query_init import (
    QueryInitializer,
    TaskAwareQueries,
    sample_recognition_features,
    select_topn,
)

DEFAULT_SHAPES = [(32, 32), (16, 16), (8, 8), (4, 4)]  # 256 x 256 input


def test_select_topn_examples():
    assert select_topn(torch.tensor([3.0, 1.0, 2.0]), 2).tolist() == [0, 2]
    assert select_topn(torch.tensor([1.0, 1.0, 1.0]), 2).tolist() == [0, 1]
    with pytest.raises(ValueError):
        select_topn(torch.tensor([1.0, 2.0]), 3)


def test_select_topn_matches_sort_oracle(rng):
    for _ in range(50):
        scores = rng.integers(0, 5, size=(2, 40)).astype(np.float32)  # many ties
        got = select_topn(torch.tensor(scores), 7).numpy()
        for row, idx in zip(scores, got):
            oracle = sorted(range(len(row)), key=lambda i: (-row[i], i))[:7]
            assert idx.tolist() == oracle


def test_select_topn_scale_invariant(rng):
    s = torch.tensor(rng.normal(size=(3, 50)))
    assert torch.equal(select_topn(s, 10), select_topn(s * 3.7, 10))


def test_score_memory_shape_bias_and_monotonicity():
    mem = make_memory(DEFAULT_SHAPES, 16, batch=2)
    qi = QueryInitializer(16, 10, 5)
    assert qi.score_memory(mem).shape == (2, mem.num_tokens)
    with torch.no_grad():
        qi.score_head.weight.zero_()
    assert torch.equal(qi.score_memory(mem), torch.full((2, mem.num_tokens), qi.score_head.bias.item()))
    torch.nn.init.normal_(qi.score_head.weight)
    s0 = qi.score_memory(mem)
    k = int(s0[0].argmax())
    bumped = mem.tokens.clone()
    bumped[0, k] += 0.5 * qi.score_head.weight[0]
    assert qi.score_memory(mem.with_tokens(bumped))[0, k] >= s0[0, k]


def test_constant_memory_gives_constant_recognition_queries():
    pos, lvl = token_positions(DEFAULT_SHAPES)
    v = torch.linspace(-1, 1, 16)
    mem = EncoderMemory(v.expand(1, pos.shape[0], 16).clone(), pos, lvl, DEFAULT_SHAPES)
    qi = QueryInitializer(16, 10, 25)
    boxes = torch.tensor([[[0.5, 0.5, 0.4, 0.2], [0.3, 0.6, 0.1, 0.3]]])
    r = qi.init_recognition_queries(mem, boxes)
    assert r.shape == (1, 2, 25, 16)
    assert torch.allclose(r, v.expand_as(r), atol=1e-6)


def test_one_cell_proposal():
    shapes = [(8, 8)]
    mem = make_memory(shapes, 4, dtype=torch.float64)
    fmap = mem.level_maps()[0]
    i, j = 3, 5
    box = torch.tensor([[[(j + 0.5) / 8, (i + 0.5) / 8, 1 / 8, 1 / 8]]], dtype=torch.float64)
    got = sample_recognition_features(fmap, box, 6, 4)[0, 0].numpy()
    # bilinear oracle over the same 4 x 6 grid, rows averaged
    fx = (np.arange(6) + 0.5) / 6 - 0.5
    fy = (np.arange(4) + 0.5) / 4 - 0.5
    expected = np.stack(
        [np.mean([bilinear_oracle(fmap[0].numpy(), (j + 0.5 + x) / 8, (i + 0.5 + y) / 8) for y in fy], 0) for x in fx]
    )
    assert got == pytest.approx(expected, abs=1e-10)
    # a locally constant neighbourhood makes the cell's feature come back exactly
    patch = fmap.clone()
    patch[..., i - 1:i + 2, j - 1:j + 2] = fmap[..., i:i + 1, j:j + 1]
    got = sample_recognition_features(patch, box, 6, 4)[0, 0]
    assert torch.allclose(got, fmap[0, :, i, j].expand(6, -1), atol=1e-12)
    # zero-area proposal at the cell center collapses onto the cell
    box0 = box.clone()
    box0[..., 2:] = 0
    got = sample_recognition_features(fmap, box0, 6, 4)[0, 0]
    assert torch.allclose(got, fmap[0, :, i, j].expand(6, -1), atol=1e-12)


def test_recognition_sampling_translation_equivariant():
    g = torch.Generator().manual_seed(0)
    fmap = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)
    shifted = torch.roll(fmap, shifts=(2, 3), dims=(2, 3))
    box = torch.tensor([[[0.4, 0.35, 0.2, 0.1]]], dtype=torch.float64)
    moved = box + torch.tensor([3 / 16, 2 / 16, 0, 0], dtype=torch.float64)
    a = sample_recognition_features(fmap, box, 5, 4)
    b = sample_recognition_features(shifted, moved, 5, 4)
    assert torch.allclose(a, b, atol=1e-12)


def test_default_shapes_and_assembly():
    mem = make_memory(DEFAULT_SHAPES, 64, batch=2)
    qi = QueryInitializer(64, 100, 25)
    queries, enc = qi(mem)
    S = queries.stacked
    assert S.shape == (2, 100, 26, 64)
    assert queries.recognition.shape == (2, 100, 25, 64)
    G, R = TaskAwareQueries.split(S)
    assert torch.equal(G, queries.detection) and torch.equal(R, queries.recognition)
    assert enc["indices"].shape == (2, 100)
    assert torch.equal(enc["indices"], select_topn(enc["scores"], 100))
    assert ((queries.proposals >= 0) & (queries.proposals <= 1)).all()


def test_baseline_queries_are_learned_embeddings():
    mem = make_memory(DEFAULT_SHAPES, 16, batch=2)
    qi = QueryInitializer(16, 10, 5, use_taqi=False)
    queries, _ = qi(mem)
    assert torch.equal(queries.detection[0], qi.detection_embed.weight)
    assert torch.equal(queries.recognition[1, 3], qi.recognition_embed.weight)
