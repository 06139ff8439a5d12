"""Object Learner: learnable object/context queries cross-attend (two-stage
trajectory attention) over the per-frame concatenation of projected visual
tokens and trajectory slots, distilling the clip into a fixed-size set of
summary vectors regardless of frame count.

The first O queries receive projected object-ID embeddings shared with the
trajectory encoder, tying each summary slot to one box track.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import TrajectoryCrossBlock
from .errors import ShapeError


class ObjectLearner(nn.Module):
    def __init__(self, dim: int = 64, num_layers: int = 4, num_heads: int = 4,
                 num_objects: int = 3, num_context: int = 2, visual_dim: int = 64,
                 traj_dim: int = 64, ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        self.dim = dim
        self.num_objects = num_objects
        self.num_context = num_context
        self.queries = nn.Parameter(torch.empty(num_objects + num_context, dim))
        nn.init.trunc_normal_(self.queries, std=0.02)
        self.id_proj = nn.Linear(traj_dim, dim, bias=False)
        self.visual_proj = nn.Linear(visual_dim, dim)
        self.traj_proj = nn.Linear(traj_dim, dim)
        self.blocks = nn.ModuleList(
            TrajectoryCrossBlock(dim, num_heads, ffn_ratio, dropconnect)
            for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def build_queries(self, id_table: torch.Tensor, batch_size: int) -> torch.Tensor:
        """Expand the learnable query set and add projected ID embeddings to
        the first O queries; the K context queries stay free."""
        if id_table.shape[0] != self.num_objects:
            raise ShapeError(
                f"id table has {id_table.shape[0]} rows, learner expects {self.num_objects}"
            )
        q = self.queries.to(id_table.dtype).unsqueeze(0).repeat(batch_size, 1, 1)
        q[:, : self.num_objects] = q[:, : self.num_objects] + self.id_proj(id_table)
        return q

    def build_keys_values(self, v: torch.Tensor, g: torch.Tensor,
                          kv_mask: torch.Tensor | None = None):
        """Concatenate projected streams per frame: visual tokens first, then
        the O+1 trajectory slots. Returns (kv (B, T', S_kv, C), mask)."""
        if v.shape[1] != g.shape[1]:
            raise ShapeError(
                f"visual stream has {v.shape[1]} pooled frames, trajectory stream {g.shape[1]}"
            )
        kv = torch.cat([self.visual_proj(v), self.traj_proj(g)], dim=2)
        mask = None
        if kv_mask is not None:
            visual_ok = torch.ones(
                v.shape[0], v.shape[1], v.shape[2], dtype=torch.bool, device=v.device
            )
            mask = torch.cat([visual_ok, kv_mask], dim=2)
        return kv, mask

    def forward(self, v: torch.Tensor, g: torch.Tensor, id_table: torch.Tensor,
                kv_mask: torch.Tensor | None = None) -> torch.Tensor:
        """v: (B, T', S_visual, C_v); g: (B, T', O+1, C_t); returns S (B, O+K, C)."""
        kv, mask = self.build_keys_values(v, g, kv_mask)
        q = self.build_queries(id_table, v.shape[0])
        for block in self.blocks:
            q = block(q, kv, mask)
        return self.norm(q)
