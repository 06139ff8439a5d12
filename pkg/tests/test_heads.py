import math

import numpy as np
import torch

from ocvt.attention import capture_attention, collect_attention_rows
from ocvt.heads import ClassificationModule, MlpClassifier, fuse_probabilities
from oracles import dense_attention_oracle


def test_output_width_independent_of_summary_count():
    torch.manual_seed(0)
    mod = ClassificationModule(dim=32, num_layers=2, num_heads=4)
    for n in (5, 8):
        out = mod(torch.randn(2, n, 32))
        assert out.shape == (2, 32)


def test_attention_rows_sum_to_one():
    torch.manual_seed(1)
    mod = ClassificationModule(dim=16, num_layers=2, num_heads=2)
    with capture_attention(mod) as mods:
        mod(torch.randn(3, 5, 16))
        rows = collect_attention_rows(mods)
    for r in rows:
        assert torch.allclose(r.sum(-1), torch.ones_like(r.sum(-1)), atol=1e-5)


def test_single_layer_matches_manual_attention():
    torch.manual_seed(2)
    mod = ClassificationModule(dim=4, num_layers=1, num_heads=1).double()
    summaries = torch.randn(1, 3, 4, dtype=torch.float64)
    block = mod.blocks[0]
    x = torch.cat([mod.cls.double().expand(1, 1, 4), summaries], dim=1)
    normed = block.norm1(x)
    expected, _ = dense_attention_oracle(
        normed[0].detach().numpy(),
        block.attn.qkv.weight.detach().numpy(), block.attn.qkv.bias.detach().numpy(),
        block.attn.proj.weight.detach().numpy(), block.attn.proj.bias.detach().numpy(),
        num_heads=1)
    got = block.attn(normed)
    assert np.allclose(got[0].detach().numpy(), expected, atol=1e-6)


def test_fused_equals_softmax_when_heads_agree():
    logits = torch.randn(4, 6)
    fused = fuse_probabilities(logits, logits)
    assert torch.allclose(fused, logits.softmax(-1), atol=1e-7)


def test_fused_rows_sum_to_one():
    fused = fuse_probabilities(torch.randn(8, 5), torch.randn(8, 5))
    assert torch.allclose(fused.sum(-1), torch.ones(8), atol=1e-6)
    assert (fused >= 0).all()


def test_fusion_argmax_worked_example():
    # (softmax([2,0]) + softmax([0,1])) / 2: class 0 wins via the confident head
    f1 = torch.tensor([[2.0, 0.0]])
    f2 = torch.tensor([[0.0, 1.0]])
    fused = fuse_probabilities(f1, f2)
    p1 = math.exp(2) / (math.exp(2) + 1)
    p2 = 1 / (1 + math.e)
    assert abs(fused[0, 0].item() - (p1 + p2) / 2) < 1e-6
    assert fused[0].argmax() == 0


def test_classifier_structure_and_reinit():
    torch.manual_seed(3)
    clf = MlpClassifier(16, 8)
    hidden_before = clf.fc1.weight.clone()
    clf.reinit_output(3)
    assert clf.num_classes == 3
    assert clf(torch.randn(2, 16)).shape == (2, 3)
    assert torch.equal(clf.fc1.weight, hidden_before)  # only the output layer is replaced
