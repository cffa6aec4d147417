import numpy as np
import pytest
import torch

from fd import relative_error
from textspotter.model.backbone import PYRAMID_STRIDES, Backbone
from textspotter.model.deformable import (
    EncoderMemory,
    MultiScaleDeformableAttention,
    bilinear_sample,
    token_positions,
)
from textspotter.model.encoder import DeformableEncoder


def make_memory(level_shapes, dim, batch=1, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    pos, lvl = token_positions(level_shapes, dtype=dtype)
    tokens = torch.randn(batch, pos.shape[0], dim, generator=g, dtype=dtype)
    return EncoderMemory(tokens, pos, lvl, list(level_shapes))


def bilinear_oracle(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Pixel centers at (j + .5) / W; zero outside."""
    c, h, w = fmap.shape
    px, py = x * w - 0.5, y * h - 0.5
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    out = np.zeros(c)
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            wt = (1 - abs(px - xx)) * (1 - abs(py - yy))
            if 0 <= xx < w and 0 <= yy < h:
                out += wt * fmap[:, yy, xx]
    return out


@pytest.mark.parametrize(
    "hw, shapes",
    [
        ((256, 256), [(32, 32), (16, 16), (8, 8), (4, 4)]),
        ((128, 192), [(16, 24), (8, 12), (4, 6), (2, 3)]),
    ],
)
def test_level_shapes(hw, shapes):
    bb = Backbone((8, 8, 16, 16), 16, 8)
    pyr = bb(torch.rand(1, 3, *hw))
    assert pyr.level_shapes == shapes
    mem = pyr.flatten()
    assert mem.num_tokens == sum(h * w for h, w in shapes)
    assert all(level.shape[1] == 16 for level in pyr.levels)
    assert PYRAMID_STRIDES == (8, 16, 32, 64)


def test_non_divisible_input_is_padded():
    bb = Backbone((8, 8, 16, 16), 16, 8)
    pyr = bb(torch.rand(1, 3, 100, 70))
    assert pyr.padded_hw == (128, 128)
    assert pyr.image_hw == (100, 70)


def test_zero_image_is_finite():
    bb = Backbone((8, 8, 16, 16), 16, 8)
    enc = DeformableEncoder(16, 2, 4, 2, 32, 2)
    mem = enc(bb(torch.zeros(1, 3, 64, 64)).flatten())
    assert torch.isfinite(mem.tokens).all()


def test_token_positions_are_cell_centers():
    pos, lvl = token_positions([(2, 3), (1, 1)])
    assert torch.allclose(pos[:6], torch.tensor([[1 / 6, 0.25], [0.5, 0.25], [5 / 6, 0.25],
                                                 [1 / 6, 0.75], [0.5, 0.75], [5 / 6, 0.75]]))
    assert pos[6].tolist() == [0.5, 0.5]
    assert lvl.tolist() == [0] * 6 + [1]


def test_bilinear_sample_matches_oracle(rng):
    fmap = rng.normal(size=(3, 5, 7))
    pts = rng.uniform(-0.1, 1.1, size=(20, 2))
    got = bilinear_sample(torch.tensor(fmap)[None], torch.tensor(pts)[None])[0].numpy()
    for k, (x, y) in enumerate(pts):
        assert got[k] == pytest.approx(bilinear_oracle(fmap, x, y), abs=1e-10)


def _identity_attention(dim, levels=1, points=1, heads=1):
    attn = MultiScaleDeformableAttention(dim, heads, levels, points).double()
    with torch.no_grad():
        attn.sampling_offsets.weight.zero_()
        attn.sampling_offsets.bias.zero_()
        for lin in (attn.value_proj, attn.output_proj):
            lin.weight.copy_(torch.eye(dim))
            lin.bias.zero_()
    return attn


def test_zero_offsets_single_point_is_bilinear_sample(rng):
    mem = make_memory([(4, 6)], 8, dtype=torch.float64)
    attn = _identity_attention(8)
    refs = torch.tensor(rng.uniform(0, 1, (1, 10, 2)))
    out = attn(torch.randn(1, 10, 8, dtype=torch.float64), refs, mem)
    fmap = mem.level_maps()[0][0].numpy()
    for k in range(10):
        x, y = refs[0, k].tolist()
        assert out[0, k].detach().numpy() == pytest.approx(bilinear_oracle(fmap, x, y), abs=1e-10)


def test_grid_center_reproduces_token():
    mem = make_memory([(4, 6)], 8, dtype=torch.float64)
    attn = _identity_attention(8)
    out = attn(torch.randn(1, 24, 8, dtype=torch.float64), mem.positions[None], mem)
    assert torch.allclose(out[0], mem.tokens[0], atol=1e-12)


def test_attention_weights_sum_to_one():
    mem = make_memory([(4, 4), (2, 2)], 16)
    attn = MultiScaleDeformableAttention(16, 4, 2, 3)
    torch.nn.init.normal_(attn.attention_weights.weight)
    _, w, loc = attn(torch.randn(2, 5, 16), torch.rand(2, 5, 4), make_memory([(4, 4), (2, 2)], 16, batch=2),
                     return_weights=True)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(dim=(-1, -2)), torch.ones(2, 5, 4), atol=1e-6)
    assert loc.shape == (2, 5, 4, 2, 3, 2)


def test_out_of_range_samples_are_zero():
    mem = make_memory([(4, 4)], 8, dtype=torch.float64)
    attn = _identity_attention(8)
    out = attn(torch.randn(1, 2, 8, dtype=torch.float64), torch.tensor([[[-0.5, 0.5], [0.5, 1.6]]]), mem)
    assert torch.equal(out, torch.zeros_like(out))


def test_encoder_preserves_shape_and_identity_when_zeroed():
    mem = make_memory([(4, 4), (2, 2), (1, 1), (1, 1)], 16, batch=2)
    enc = DeformableEncoder(16, 2, 4, 2, 32, 3)
    out = enc(mem)
    assert out.tokens.shape == mem.tokens.shape
    with torch.no_grad():
        for layer in enc.layers:
            layer.attn.output_proj.weight.zero_()
            layer.attn.output_proj.bias.zero_()
            layer.ffn.fc2.weight.zero_()
            layer.ffn.fc2.bias.zero_()
    assert torch.equal(enc(mem).tokens, mem.tokens)


def test_encoder_permutation_consistent():
    mem = make_memory([(4, 4), (2, 2)], 16, dtype=torch.float64)
    enc = DeformableEncoder(16, 2, 2, 2, 32, 2).double()
    out = enc(mem).tokens
    perm = torch.randperm(mem.num_tokens, generator=torch.Generator().manual_seed(3))
    shuffled = EncoderMemory(mem.tokens[:, perm], mem.positions[perm], mem.level_ids[perm], mem.level_shapes)
    assert torch.allclose(enc(shuffled).tokens, out[:, perm], atol=1e-12)


def test_encoder_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = DeformableEncoder(8, 2, 1, 2, 16, 1).double()
    mem = make_memory([(1, 2)], 8, dtype=torch.float64)
    w = torch.randn(1, 2, 8, dtype=torch.float64)

    def f(tokens):
        return (enc(mem.with_tokens(tokens)).tokens * w).sum()

    assert relative_error(f, mem.tokens) < 1e-4


def test_deformable_attention_gradient():
    torch.manual_seed(1)
    attn = MultiScaleDeformableAttention(8, 2, 2, 2).double()
    torch.nn.init.normal_(attn.sampling_offsets.weight, std=0.1)
    torch.nn.init.normal_(attn.attention_weights.weight, std=0.5)
    mem = make_memory([(3, 3), (2, 2)], 8, dtype=torch.float64)
    ref = torch.tensor([[[0.4, 0.55, 0.3, 0.2], [0.61, 0.37, 0.2, 0.4]]], dtype=torch.float64)
    w = torch.randn(1, 2, 8, dtype=torch.float64)
    query = torch.randn(1, 2, 8, dtype=torch.float64)
    assert relative_error(lambda q: (attn(q, ref, mem) * w).sum(), query) < 1e-4
    assert relative_error(lambda t: (attn(query, ref, mem.with_tokens(t)) * w).sum(), mem.tokens) < 1e-4
