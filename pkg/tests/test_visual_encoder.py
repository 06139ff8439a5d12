import numpy as np
import pytest
import torch

from ocvt.attention import capture_attention, collect_attention_rows
from ocvt.errors import ConfigurationError, ShapeError
from ocvt.visual_encoder import PatchTokenizer, VisualEncoder
from oracles import grad_check, trajectory_attention_oracle


def test_token_grid_shape():
    torch.manual_seed(0)
    tok = PatchTokenizer(32, height=32, width=32, patch_size=8, max_frames=8)
    tokens, cls = tok(torch.randn(2, 8, 32, 32, 3))
    assert tokens.shape == (2, 4, 16, 32)
    assert cls.shape == (2, 1, 32)


def test_zero_clip_zero_pos_gives_projection_bias():
    torch.manual_seed(1)
    tok = PatchTokenizer(16, 16, 16, patch_size=8, max_frames=4)
    with torch.no_grad():
        tok.pos.zero_()
    tokens, _ = tok(torch.zeros(1, 4, 16, 16, 3))
    bias = tok.proj.bias.detach()
    assert torch.allclose(tokens, bias.expand_as(tokens), atol=1e-7)


def test_single_patch_projection_oracle():
    torch.manual_seed(2)
    tok = PatchTokenizer(8, 16, 16, patch_size=8, max_frames=2).double()
    with torch.no_grad():
        tok.pos.zero_()
    clip = torch.zeros(1, 2, 16, 16, 3, dtype=torch.float64)
    patch = torch.randn(2, 8, 8, 3, dtype=torch.float64)
    clip[0, :, 8:, :8] = patch  # grid position (row=1, col=0) -> spatial index 2
    tokens, _ = tok(clip)
    w = tok.proj.weight.detach()  # (C, 3, 2, 8, 8)
    expected = torch.einsum("cdtij,tijd->c", w, patch) + tok.proj.bias.detach()
    assert torch.allclose(tokens[0, 0, 2], expected, atol=1e-9)
    others = [s for s in range(4) if s != 2]
    assert torch.allclose(tokens[0, 0, others], tok.proj.bias.expand(3, 8), atol=1e-9)


def test_dims_must_divide():
    with pytest.raises(ConfigurationError, match="divisible"):
        PatchTokenizer(16, 20, 32, patch_size=8, max_frames=4)
    tok = PatchTokenizer(16, 16, 16, patch_size=8, max_frames=4)
    with pytest.raises(ConfigurationError, match="temporal"):
        tok(torch.randn(1, 3, 16, 16, 3))
    with pytest.raises(ShapeError, match="configured"):
        tok(torch.randn(1, 4, 32, 32, 3))


def test_tap_layer_bounds():
    with pytest.raises(ConfigurationError, match="tap_layer"):
        VisualEncoder(dim=16, depth=2, num_heads=2, height=16, width=16,
                      patch_size=8, tap_layer=3)


def test_tap_at_last_layer_and_purity():
    torch.manual_seed(3)
    enc = VisualEncoder(dim=16, depth=3, num_heads=2, height=16, width=16, patch_size=8,
                        max_frames=4, tap_layer=3)
    enc.eval()
    clip = torch.randn(1, 4, 16, 16, 3)
    full = enc(clip)
    assert full.v is not None and full.c_visual is not None
    # tapping mid-depth: V identical whether or not deeper layers execute
    enc2 = VisualEncoder(dim=16, depth=3, num_heads=2, height=16, width=16, patch_size=8,
                         max_frames=4, tap_layer=2)
    enc2.eval()
    v_full = enc2(clip).v
    v_stop = enc2(clip, stop_at_tap=True).v
    assert torch.equal(v_full, v_stop)


def test_attention_rows_sum_to_one():
    torch.manual_seed(4)
    enc = VisualEncoder(dim=16, depth=2, num_heads=2, height=16, width=16, patch_size=8,
                        max_frames=4, tap_layer=1)
    enc.eval()
    with capture_attention(enc) as mods:
        enc(torch.randn(2, 4, 16, 16, 3))
        rows = collect_attention_rows(mods)
    assert rows
    for r in rows:
        assert torch.allclose(r.sum(-1), torch.ones_like(r.sum(-1)), atol=1e-5)


def test_single_layer_matches_bruteforce_attention():
    # depth 1, grid of 2 tokens, T'=1: encoder block equals the two-stage oracle
    torch.manual_seed(5)
    enc = VisualEncoder(dim=8, depth=1, num_heads=2, height=8, width=16, patch_size=8,
                        max_frames=2, tap_layer=1).double()
    enc.eval()
    clip = torch.randn(1, 2, 8, 16, 3, dtype=torch.float64)
    grid, cls = enc.tokenizer(clip)
    block = enc.blocks[0]
    x = torch.cat([cls, grid.reshape(1, 2, 8)], dim=1)
    normed = block.norm1(x)
    expected_attn = trajectory_attention_oracle(block.attn, normed[0], normed[0, 1:].view(1, 2, 8))
    got = block.attn(normed, normed[:, 1:].view(1, 1, 2, 8))
    assert np.allclose(got[0].detach().numpy(), expected_attn, atol=1e-5)


def test_c_visual_pixel_gradient_matches_finite_differences():
    torch.manual_seed(6)
    enc = VisualEncoder(dim=8, depth=1, num_heads=2, height=8, width=8, patch_size=8,
                        max_frames=2, tap_layer=1).double()
    enc.eval()
    clip0 = torch.randn(2, 8, 8, 3, dtype=torch.float64) * 0.5

    def f(c):
        return enc(c.unsqueeze(0)).c_visual.sum()

    rel = grad_check(f, clip0)
    assert rel < 1e-3


def test_batch_independence():
    torch.manual_seed(7)
    enc = VisualEncoder(dim=16, depth=2, num_heads=2, height=16, width=16, patch_size=8,
                        max_frames=4, tap_layer=1)
    enc.eval()
    a = torch.randn(1, 4, 16, 16, 3)
    b = torch.randn(1, 4, 16, 16, 3)
    solo = enc(a)
    batched = enc(torch.cat([a, b]))
    assert torch.allclose(solo.c_visual[0], batched.c_visual[0], atol=1e-6)
    assert torch.allclose(solo.v[0], batched.v[0], atol=1e-6)
