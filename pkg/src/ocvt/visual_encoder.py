"""Visual stream: 3D patch tokenizer plus a stack of trajectory-attention
self-attention layers. The token grid after a configurable mid layer is
tapped as the feature volume for the object learner; the CLS output of the
last layer is the video-level visual embedding.

Production-scale constants from the source architecture are kept in
`PRODUCTION_CONFIG` for reference; the defaults here are the desk-scale
configuration (dim 64, depth 4, tap at half depth).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import DropConnect, FeedForward, TrajectoryAttention
from .errors import ConfigurationError, ShapeError

# reference full-scale configuration (not instantiated at desk scale)
PRODUCTION_CONFIG = {
    "dim": 768,
    "depth": 12,
    "heads": 12,
    "patch": (2, 16, 16),
    "frames": 16,
    "frame_size": 224,
    "tap_layer": 6,
}


@dataclass
class FeatureVolume:
    v: torch.Tensor  # (B, T', H'W', C) token grid at the tap layer
    c_visual: torch.Tensor | None  # (B, C); None when the forward stops at the tap
    tap_layer: int
    grid: tuple  # (H', W')


class PatchTokenizer(nn.Module):
    """Linear projection of 2 x p x p spatio-temporal patches plus learned
    position embeddings and a CLS token."""

    def __init__(self, dim: int, height: int, width: int, patch_size: int, max_frames: int):
        super().__init__()
        if height % patch_size or width % patch_size:
            raise ConfigurationError(
                f"frame size {height}x{width} not divisible by patch size {patch_size}"
            )
        if max_frames % 2:
            raise ConfigurationError(f"max_frames must be even, got {max_frames}")
        self.height, self.width, self.patch_size = height, width, patch_size
        self.grid = (height // patch_size, width // patch_size)
        self.n_spatial = self.grid[0] * self.grid[1]
        self.max_t = max_frames // 2
        self.proj = nn.Conv3d(3, dim, kernel_size=(2, patch_size, patch_size),
                              stride=(2, patch_size, patch_size))
        self.pos = nn.Parameter(torch.zeros(1, self.max_t, self.n_spatial, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))

    def forward(self, clip: torch.Tensor):
        """clip: (B, T, H, W, 3) in [-1, 1]. Returns tokens (B, T', S, C), cls (B, 1, C)."""
        B, T, H, W, _ = clip.shape
        if H != self.height or W != self.width:
            raise ShapeError(f"clip is {H}x{W}, tokenizer configured for {self.height}x{self.width}")
        if T % 2:
            raise ConfigurationError(f"clip length {T} not divisible by temporal patch size 2")
        if T // 2 > self.max_t:
            raise ShapeError(f"{T} frames exceeds configured maximum {self.max_t * 2}")
        x = self.proj(clip.permute(0, 4, 1, 2, 3))  # (B, C, T', H', W')
        x = x.flatten(3).permute(0, 2, 3, 1)  # (B, T', S, C)
        x = x + self.pos.to(x.dtype)[:, : x.shape[1]]
        return x, self.cls.to(x.dtype).expand(B, 1, -1)


class VisualBlock(nn.Module):
    """Pre-norm block where every token (grid + CLS) queries the grid with
    two-stage trajectory attention."""

    def __init__(self, dim: int, num_heads: int, ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = TrajectoryAttention(dim, num_heads)
        self.drop = DropConnect(dropconnect)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, ffn_ratio)

    def forward(self, grid: torch.Tensor, cls: torch.Tensor):
        B, T, S, C = grid.shape
        x = torch.cat([cls, grid.reshape(B, T * S, C)], dim=1)
        normed = self.norm1(x)
        attn_out = self.attn(normed, normed[:, 1:].view(B, T, S, C))
        x = x + self.drop(attn_out)
        x = x + self.mlp(self.norm2(x))
        return x[:, 1:].view(B, T, S, C), x[:, :1]


class VisualEncoder(nn.Module):
    def __init__(self, dim: int = 64, depth: int = 4, num_heads: int = 4, height: int = 32,
                 width: int = 32, patch_size: int = 8, max_frames: int = 16, tap_layer: int = 2,
                 ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        if not 1 <= tap_layer <= depth:
            raise ConfigurationError(f"tap_layer {tap_layer} outside [1, {depth}]")
        self.dim = dim
        self.depth = depth
        self.tap_layer = tap_layer
        self.tokenizer = PatchTokenizer(dim, height, width, patch_size, max_frames)
        self.blocks = nn.ModuleList(
            VisualBlock(dim, num_heads, ffn_ratio, dropconnect) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    @property
    def grid(self):
        return self.tokenizer.grid

    def forward(self, clip: torch.Tensor, stop_at_tap: bool = False) -> FeatureVolume:
        grid, cls = self.tokenizer(clip)
        v = None
        for i, block in enumerate(self.blocks, start=1):
            grid, cls = block(grid, cls)
            if i == self.tap_layer:
                v = grid
                if stop_at_tap:
                    return FeatureVolume(v=v, c_visual=None, tap_layer=self.tap_layer,
                                         grid=self.tokenizer.grid)
        c_visual = self.norm(cls)[:, 0]
        return FeatureVolume(v=v, c_visual=c_visual, tap_layer=self.tap_layer,
                             grid=self.tokenizer.grid)
