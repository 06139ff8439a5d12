"""Trajectory stream: box embedding, per-frame spatial layout attention,
cross-frame temporal attention, and assembly of the spatio-temporal layout
features consumed by the object learner.

Object identity travels through added ID embeddings rather than positional
encodings, so object slots stay permutation-equivariant end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import SelfAttentionBlock
from .errors import BoxValidationError, ConfigurationError, ShapeError


def validate_box_tracks(boxes: torch.Tensor, presence: torch.Tensor | None = None):
    """Boxes must be [x1, y1, x2, y2] in [0, 1]; present entries non-degenerate."""
    if boxes.shape[-1] != 4:
        raise ShapeError(f"boxes last dim must be 4, got {tuple(boxes.shape)}")
    if boxes.min() < 0.0 or boxes.max() > 1.0:
        bad = boxes[(boxes < 0.0) | (boxes > 1.0)][0].item()
        raise BoxValidationError(f"box coordinate {bad} outside [0, 1]")
    if presence is not None:
        x_ok = boxes[..., 0] <= boxes[..., 2]
        y_ok = boxes[..., 1] <= boxes[..., 3]
        if bool((presence & ~(x_ok & y_ok)).any()):
            raise BoxValidationError("present box with x1 > x2 or y1 > y2")


@dataclass
class TrajectoryFeatures:
    """Outputs of the trajectory encoder for one batch."""

    G: torch.Tensor  # (B, T', O+1, C); slots 0..O-1 boxes, slot O frame summary
    c_traj: torch.Tensor  # (B, C)
    l_out: torch.Tensor  # (B, T, C)
    phi_out: torch.Tensor  # (B, T, O, C)
    kv_mask: torch.Tensor  # (B, T', O+1) bool, attendability per pooled slot


class BoxEmbedder(nn.Module):
    """Pointwise 2-layer MLP from 4 box coordinates to the feature dimension."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(4, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, boxes: torch.Tensor) -> torch.Tensor:
        validate_box_tracks(boxes)
        return self.fc2(self.act(self.fc1(boxes)))


class SpatialTransformer(nn.Module):
    """Encodes each frame's box layout separately; a CLS token summarizes the frame."""

    def __init__(self, dim: int, num_layers: int, num_heads: int, ffn_ratio: int = 4,
                 dropconnect: float = 0.0):
        super().__init__()
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, num_heads, ffn_ratio, dropconnect) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, phi_in: torch.Tensor, presence: torch.Tensor | None = None):
        """phi_in: (B, O, T, C); presence: (B, O, T). Returns l (B, T, C), phi_out (B, T, O, C)."""
        B, O, T, C = phi_in.shape
        x = phi_in.permute(0, 2, 1, 3).reshape(B * T, O, C)
        x = torch.cat([self.cls.to(x.dtype).expand(B * T, 1, C), x], dim=1)
        mask = None
        if presence is not None:
            mask = torch.cat(
                [
                    torch.ones(B * T, 1, dtype=torch.bool, device=x.device),
                    presence.permute(0, 2, 1).reshape(B * T, O),
                ],
                dim=1,
            )
        for block in self.blocks:
            x = block(x, key_mask=mask)
        x = self.norm(x)
        l = x[:, 0].view(B, T, C)
        phi_out = x[:, 1:].view(B, T, O, C)
        return l, phi_out


class TemporalTransformer(nn.Module):
    """Self-attention over frame summaries with learned temporal positions."""

    def __init__(self, dim: int, num_layers: int, num_heads: int, max_frames: int,
                 ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        self.max_frames = max_frames
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.zeros(1, max_frames, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, num_heads, ffn_ratio, dropconnect) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, l: torch.Tensor):
        """l: (B, T, C). Returns c_traj (B, C), l_out (B, T, C)."""
        B, T, C = l.shape
        if T > self.max_frames:
            raise ShapeError(f"{T} frames exceeds configured maximum {self.max_frames}")
        # motion lives in the deviations from the clip-mean frame summary; the
        # shared component otherwise swamps the attention signal at this scale
        x = l - l.mean(dim=1, keepdim=True)
        x = x + self.pos.to(l.dtype)[:, :T]
        x = torch.cat([self.cls.to(l.dtype).expand(B, 1, C), x], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]


def assemble_trajectory_features(phi_out: torch.Tensor, l_out: torch.Tensor, stride: int) -> torch.Tensor:
    """Concatenate box slots with the frame-summary slot (last) and mean-pool
    non-overlapping temporal windows of length `stride`."""
    B, T, O, C = phi_out.shape
    if stride < 1 or T % stride != 0:
        raise ConfigurationError(f"temporal stride {stride} does not divide {T} frames")
    g = torch.cat([phi_out, l_out.unsqueeze(2)], dim=2)  # (B, T, O+1, C)
    return g.view(B, T // stride, stride, O + 1, C).mean(dim=2)


def pool_presence(presence: torch.Tensor, stride: int) -> torch.Tensor:
    """Window-level attendability: an object slot is valid where it is present
    in at least one frame of the window; the frame-summary slot always is."""
    B, O, T = presence.shape
    win = presence.view(B, O, T // stride, stride).any(dim=-1).permute(0, 2, 1)  # (B, T', O)
    ones = torch.ones(B, win.shape[1], 1, dtype=torch.bool, device=presence.device)
    return torch.cat([win, ones], dim=2)


class TrajectoryEncoder(nn.Module):
    def __init__(self, dim: int = 64, num_objects: int = 3, spatial_layers: int = 2,
                 temporal_layers: int = 2, num_heads: int = 4, max_frames: int = 16,
                 temporal_stride: int = 2, ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        self.dim = dim
        self.num_objects = num_objects
        self.temporal_stride = temporal_stride
        self.box_embedder = BoxEmbedder(dim)
        self.id_table = nn.Parameter(torch.empty(num_objects, dim))
        nn.init.trunc_normal_(self.id_table, std=0.02)
        self.spatial = SpatialTransformer(dim, spatial_layers, num_heads, ffn_ratio, dropconnect)
        self.temporal = TemporalTransformer(dim, temporal_layers, num_heads, max_frames,
                                            ffn_ratio, dropconnect)

    def embed_boxes(self, boxes: torch.Tensor) -> torch.Tensor:
        return self.box_embedder(boxes)

    def add_id_embeddings(self, phi: torch.Tensor) -> torch.Tensor:
        if phi.shape[1] != self.id_table.shape[0]:
            raise ShapeError(
                f"{phi.shape[1]} object slots vs {self.id_table.shape[0]} ID embeddings"
            )
        return phi + self.id_table.to(phi.dtype)[None, :, None, :]

    def forward(self, boxes: torch.Tensor, presence: torch.Tensor | None = None) -> TrajectoryFeatures:
        """boxes: (B, O, T, 4) in [0, 1]; presence: (B, O, T) bool."""
        validate_box_tracks(boxes, presence)
        B, O, T, _ = boxes.shape
        if presence is None:
            presence = torch.ones(B, O, T, dtype=torch.bool, device=boxes.device)
        phi = self.embed_boxes(boxes)
        phi_in = self.add_id_embeddings(phi)
        l, phi_out = self.spatial(phi_in, presence)
        c_traj, l_out = self.temporal(l)
        G = assemble_trajectory_features(phi_out, l_out, self.temporal_stride)
        kv_mask = pool_presence(presence, self.temporal_stride)
        return TrajectoryFeatures(G=G, c_traj=c_traj, l_out=l_out, phi_out=phi_out, kv_mask=kv_mask)
