"""Attention primitives.

Two mechanisms are used across the model:

- plain multi-head self-attention (layout transformers, classification module,
  trajectory-code encoder), with optional key masking where masked positions
  receive zero attention weight from every query;
- two-stage trajectory attention: a joint spatio-temporal softmax pools the
  spatial axis into one trajectory token per time step, then a second
  per-query temporal attention pools over those tokens. Used as
  self-attention in the visual encoder and as cross-attention in the object
  learner.

Every attention module can capture its softmax rows (`capture` flag) for
normalization checks and visualization export.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
from torch import nn

from .errors import ShapeError


class DropConnect(nn.Module):
    """Per-sample stochastic zeroing of a residual branch (train mode only)."""

    def __init__(self, rate: float = 0.0):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        if not self.training or self.rate <= 0.0:
            return x
        keep = 1.0 - self.rate
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * ratio),
            nn.GELU(),
            nn.Linear(dim * ratio, dim),
        )

    def forward(self, x):
        return self.net(x)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.capture = False
        self.captured: list = []

    def forward(self, x, key_mask=None):
        """x: (B, N, D); key_mask: (B, N) bool, True = attendable."""
        B, N, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, N, self.num_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, N, self.num_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, N, self.num_heads, self.head_dim).transpose(1, 2)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        if self.capture:
            self.captured.append({"kind": "self", "weights": attn.detach()})
        out = (attn @ v).transpose(1, 2).reshape(B, N, self.dim)
        return self.proj(out)


class TrajectoryAttention(nn.Module):
    """Two-stage attention over a (time, space) key/value grid.

    Stage 1 normalizes query-key scores jointly over all (s, t) positions and
    aggregates values along space only, producing one trajectory token per
    time step. Stage 2 re-projects the query and the trajectory tokens and
    attends over time. Both stages run independently per head; head outputs
    are concatenated and projected.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        d = self.head_dim
        self.temporal_q = nn.Parameter(torch.empty(num_heads, d, d))
        self.temporal_k = nn.Parameter(torch.empty(num_heads, d, d))
        self.temporal_v = nn.Parameter(torch.empty(num_heads, d, d))
        for w in (self.temporal_q, self.temporal_k, self.temporal_v):
            nn.init.xavier_uniform_(w)
        self.out_proj = nn.Linear(dim, dim)
        self.capture = False
        self.captured: list = []

    def forward(self, queries, kv, kv_mask=None):
        """queries: (B, Q, D); kv: (B, T, S, D); kv_mask: (B, T, S) bool."""
        B, Q, _ = queries.shape
        if kv.ndim != 4:
            raise ShapeError(f"kv must be (B, T, S, D), got {tuple(kv.shape)}")
        _, T, S, _ = kv.shape
        h, d = self.num_heads, self.head_dim

        q = self.q_proj(queries).view(B, Q, h, d).transpose(1, 2)  # (B,h,Q,d)
        k = self.k_proj(kv).view(B, T, S, h, d).permute(0, 3, 1, 2, 4)  # (B,h,T,S,d)
        v = self.v_proj(kv).view(B, T, S, h, d).permute(0, 3, 1, 2, 4)

        logits = torch.einsum("bhqd,bhtsd->bhqts", q, k) / math.sqrt(d)
        if kv_mask is not None:
            logits = logits.masked_fill(~kv_mask[:, None, None, :, :], float("-inf"))
        attn = logits.flatten(3).softmax(dim=-1).view(B, h, Q, T, S)
        pooled = torch.einsum("bhqts,bhtsd->bhqtd", attn, v)  # trajectory tokens

        q2 = torch.einsum("hed,bhqd->bhqe", self.temporal_q, q)
        k2 = torch.einsum("hed,bhqtd->bhqte", self.temporal_k, pooled)
        v2 = torch.einsum("hed,bhqtd->bhqte", self.temporal_v, pooled)
        logits2 = torch.einsum("bhqe,bhqte->bhqt", q2, k2) / math.sqrt(d)
        attn2 = logits2.softmax(dim=-1)
        if self.capture:
            self.captured.append({"kind": "traj_stage1", "weights": attn.detach()})
            self.captured.append({"kind": "traj_stage2", "weights": attn2.detach()})
        y = torch.einsum("bhqt,bhqte->bhqe", attn2, v2)
        return self.out_proj(y.transpose(1, 2).reshape(B, Q, self.dim))


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual block: self-attention (+DropConnect) then feed-forward."""

    def __init__(self, dim: int, num_heads: int, ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.drop = DropConnect(dropconnect)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, ffn_ratio)

    def forward(self, x, key_mask=None):
        x = x + self.drop(self.attn(self.norm1(x), key_mask))
        x = x + self.mlp(self.norm2(x))
        return x


class TrajectoryCrossBlock(nn.Module):
    """Pre-norm cross-attention block with trajectory attention over a fixed KV grid."""

    def __init__(self, dim: int, num_heads: int, ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = TrajectoryAttention(dim, num_heads)
        self.drop = DropConnect(dropconnect)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, ffn_ratio)

    def forward(self, q, kv, kv_mask=None):
        q = q + self.drop(self.attn(self.norm_q(q), self.norm_kv(kv), kv_mask))
        q = q + self.mlp(self.norm2(q))
        return q


def attention_modules(root: nn.Module) -> list:
    return [m for m in root.modules() if isinstance(m, (MultiHeadSelfAttention, TrajectoryAttention))]


@contextmanager
def capture_attention(root: nn.Module):
    """Enable softmax-row capture on every attention module under `root`.

    Yields the list of attention modules; after the forward pass each module's
    `.captured` holds the recorded weights.
    """
    mods = attention_modules(root)
    for m in mods:
        m.capture = True
        m.captured = []
    try:
        yield mods
    finally:
        for m in mods:
            m.capture = False


def collect_attention_rows(mods) -> list:
    """Flatten captured attention into 2D (rows, keys) tensors; each row sums to 1."""
    rows = []
    for m in mods:
        for entry in m.captured:
            w = entry["weights"]
            if entry["kind"] == "traj_stage1":
                w = w.flatten(3)  # joint (s, t) normalization: one row spans the grid
            rows.append(w.reshape(-1, w.shape[-1]))
    return rows
