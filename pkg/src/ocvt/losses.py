"""Training objectives.

- label-smoothed cross-entropy for the two classifiers;
- trajectory-contrast InfoNCE: each object summary must identify the encoding
  of its own box trajectory against all other trajectories in the batch plus
  temporally shuffled versions (raw dot-product similarities, positive term
  included in the denominator, so every per-object term is >= 0);
- the optional appendix objectives: an instance-level contrast on visual
  transformation (affinity) codes built from RoI-pooled features of
  consecutive frames, and a class-level supervised contrast on summaries.

Static trajectories (all frames equal) make a shuffle indistinguishable from
the original; such shuffled negatives are flagged degenerate and dropped.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import SelfAttentionBlock
from .errors import ConfigurationError, ShapeError, TrainingAbortError


def cross_entropy_smoothed(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.0) -> torch.Tensor:
    """CE against the smoothed target distribution (1-alpha)*onehot + alpha/K."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError(f"label smoothing alpha must be in [0, 1), got {alpha}")
    num_classes = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= num_classes:
        raise ValueError(
            f"class index outside [0, {num_classes}): {int(targets.min())}..{int(targets.max())}"
        )
    logp = logits.log_softmax(dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    uniform = -logp.mean(dim=-1)
    return ((1.0 - alpha) * nll + alpha * uniform).mean()


def shuffle_trajectory(boxes, rng: np.random.Generator):
    """Apply a uniformly random non-identity frame permutation to one object's
    box sequence. Returns (shuffled, perm, degenerate); `degenerate` marks a
    static trajectory whose shuffle equals the original."""
    T = boxes.shape[0]
    if T < 2:
        raise ValueError(f"cannot shuffle a {T}-frame trajectory")
    identity = np.arange(T)
    perm = rng.permutation(T)
    while (perm == identity).all():
        perm = rng.permutation(T)
    shuffled = boxes[perm]
    degenerate = bool((boxes == boxes[0:1]).all())
    return shuffled, perm, degenerate


class TrajectoryCodeEncoder(nn.Module):
    """Small transformer g(.): per-frame box coordinates linearly embedded,
    two self-attention layers, mean-pooled to one code vector. Temporal
    position embeddings make the code order-sensitive (a shuffled sequence
    must encode differently from the original)."""

    def __init__(self, dim: int = 64, num_layers: int = 2, num_heads: int = 4,
                 max_frames: int = 16, ffn_ratio: int = 4, in_dim: int = 4):
        super().__init__()
        self.embed = nn.Linear(in_dim, dim)
        self.pos = nn.Parameter(torch.zeros(1, max_frames, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, num_heads, ffn_ratio) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, sequences: torch.Tensor) -> torch.Tensor:
        """sequences: (N, T, in_dim) -> codes (N, dim)."""
        N, T, _ = sequences.shape
        if T > self.pos.shape[1]:
            raise ShapeError(f"{T} steps exceeds configured maximum {self.pos.shape[1]}")
        x = self.embed(sequences) + self.pos.to(sequences.dtype)[:, :T]
        for block in self.blocks:
            x = block(x)
        return self.norm(x).mean(dim=1)


def info_nce(anchors: torch.Tensor, positives: torch.Tensor,
             shuffled: torch.Tensor | None = None,
             temperature: float | None = None) -> torch.Tensor:
    """Summed InfoNCE with in-batch positives as mutual negatives.

    term_j = -log exp(a_j.p_j) / (sum_k exp(a_j.p_k) + sum_m exp(a_j.n_m))
    """
    if anchors.shape != positives.shape:
        raise ShapeError(f"anchors {tuple(anchors.shape)} vs positives {tuple(positives.shape)}")
    sims = anchors @ positives.T
    pos = sims.diagonal()
    if shuffled is not None and shuffled.shape[0] > 0:
        sims = torch.cat([sims, anchors @ shuffled.T], dim=1)
    if temperature is not None:
        sims = sims / temperature
        pos = pos / temperature
    return (sims.logsumexp(dim=1) - pos).sum()


def trajectory_contrast_loss(object_summaries: torch.Tensor, codes_true: torch.Tensor,
                             codes_shuffled: torch.Tensor | None = None,
                             temperature: float | None = None,
                             warn_empty: bool = True) -> torch.Tensor:
    """Eq.-level trajectory contrast over one batch of present objects."""
    if codes_shuffled is None or codes_shuffled.shape[0] == 0:
        if warn_empty:
            warnings.warn("trajectory contrast: no usable shuffled negatives; "
                          "denominator uses true codes only")
        codes_shuffled = None
    return info_nce(object_summaries, codes_true, codes_shuffled, temperature)


def build_trajectory_codes(encoder: TrajectoryCodeEncoder, boxes: torch.Tensor,
                           presence: torch.Tensor, summaries: torch.Tensor,
                           rng: np.random.Generator, n_shuffles: int = 1):
    """Gather per-object anchors and codes for the trajectory contrast.

    boxes (B, O, T, 4), presence (B, O, T), summaries (B, O+K, C). Objects
    absent for the whole clip are dropped; degenerate shuffles are skipped.
    Returns (anchors (N, C), z_true (N, C), z_shuffle (M, C)).
    """
    B, O, T, _ = boxes.shape
    present = presence.any(dim=-1)  # (B, O)
    anchors = summaries[:, :O][present]
    tracks = boxes[present]  # (N, T, 4)
    z_true = encoder(tracks)
    shuffled_tracks = []
    for i in range(tracks.shape[0]):
        for _ in range(n_shuffles):
            shuffled, _, degenerate = shuffle_trajectory(tracks[i], rng)
            if not degenerate:
                shuffled_tracks.append(shuffled)
    if shuffled_tracks:
        z_shuffle = encoder(torch.stack(shuffled_tracks))
    else:
        z_shuffle = tracks.new_zeros((0, z_true.shape[1]))
    return anchors, z_true, z_shuffle


# ---------------------------------------------------------------------------
# total objective


@dataclass
class LossBreakdown:
    ce_backbone: object
    ce_object: object
    aux: object = None
    aff: object = None
    obj_contrast: object = None
    total: object = None

    def named_terms(self):
        for name in ("ce_backbone", "ce_object", "aux", "aff", "obj_contrast"):
            value = getattr(self, name)
            if value is not None:
                yield name, value

    def scalars(self) -> dict:
        out = {name: _as_float(value) for name, value in self.named_terms()}
        out["total"] = _as_float(self.total)
        return out


def _as_float(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def total_loss(ce_backbone, ce_object, aux=None, aff=None, obj_contrast=None) -> LossBreakdown:
    """Unweighted sum of the enabled terms; aborts on any non-finite term."""
    breakdown = LossBreakdown(ce_backbone=ce_backbone, ce_object=ce_object, aux=aux,
                              aff=aff, obj_contrast=obj_contrast)
    total = None
    for name, value in breakdown.named_terms():
        if not math.isfinite(_as_float(value)):
            raise TrainingAbortError(name, _as_float(value))
        total = value if total is None else total + value
    breakdown.total = total
    return breakdown


# ---------------------------------------------------------------------------
# appendix objectives


def roi_pool(v: torch.Tensor, grid: tuple, boxes: torch.Tensor, presence: torch.Tensor,
             stride: int = 2):
    """Average feature-grid cells whose centers fall inside each object's box.

    v: (B, T', S, C) with S = H'*W' row-major; boxes (B, O, T, 4) normalized.
    Boxes are sampled at the first frame of each temporal window. Returns
    (pooled (B, O, T', C), degenerate (B, O, T') flags for empty regions).
    """
    B, Tp, S, C = v.shape
    gh, gw = grid
    if gh * gw != S:
        raise ShapeError(f"grid {grid} does not match {S} spatial tokens")
    O, T = boxes.shape[1], boxes.shape[2]
    if T != Tp * stride:
        raise ShapeError(f"{T} box frames vs {Tp} pooled frames at stride {stride}")
    frame_idx = torch.arange(Tp, device=boxes.device) * stride
    b = boxes[:, :, frame_idx]  # (B, O, T', 4)
    pres = presence[:, :, frame_idx]

    cols = (torch.arange(gw, device=v.device, dtype=v.dtype) + 0.5) / gw
    rows = (torch.arange(gh, device=v.device, dtype=v.dtype) + 0.5) / gh
    cx = cols.repeat(gh)  # (S,) row-major
    cy = rows.repeat_interleave(gw)

    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    inside = (
        (cx >= x1.unsqueeze(-1)) & (cx <= x2.unsqueeze(-1))
        & (cy >= y1.unsqueeze(-1)) & (cy <= y2.unsqueeze(-1))
    )  # (B, O, T', S)
    inside = inside & pres.unsqueeze(-1)
    counts = inside.sum(dim=-1)  # (B, O, T')
    weights = inside.to(v.dtype) / counts.clamp(min=1).unsqueeze(-1).to(v.dtype)
    pooled = torch.einsum("bots,btsc->botc", weights, v)
    return pooled, counts == 0


class AffinityCodeEncoder(nn.Module):
    """g'(.) for affinity sequences: same structure as the trajectory code
    encoder, but the per-step input is a flattened pairwise feature product."""

    def __init__(self, feat_dim: int, dim: int = 64, num_layers: int = 2, num_heads: int = 4,
                 max_frames: int = 16, ffn_ratio: int = 4):
        super().__init__()
        self.feat_dim = feat_dim
        self.encoder = TrajectoryCodeEncoder(dim, num_layers, num_heads, max_frames,
                                             ffn_ratio, in_dim=feat_dim * feat_dim)

    def forward(self, affinities: torch.Tensor) -> torch.Tensor:
        return self.encoder(affinities)


def affinity_sequence(w: torch.Tensor) -> torch.Tensor:
    """Consecutive-frame transformation codes: flattened outer products
    w_i (x) w_{i+1} for i = 1..T'-1. w: (T', C) -> (T'-1, C*C)."""
    return torch.einsum("tc,td->tcd", w[:-1], w[1:]).flatten(1)


def shuffled_affinity_sequence(w: torch.Tensor, rng: np.random.Generator):
    """Wrong-pair affinities w_i (x) w_k with k not in {i, i+1}.

    Returns (sequence, degenerate) where degenerate means constant features
    (shuffle indistinguishable). With T' = 2 no wrong pair exists -> None.
    """
    Tp = w.shape[0]
    steps = []
    for i in range(Tp - 1):
        candidates = [k for k in range(Tp) if k not in (i, i + 1)]
        if not candidates:
            return None, False
        k = int(rng.choice(candidates))
        steps.append(torch.einsum("c,d->cd", w[i], w[k]).flatten())
    degenerate = bool((w == w[0:1]).all())
    return torch.stack(steps), degenerate


def build_affinity_codes(encoder: AffinityCodeEncoder, pooled: torch.Tensor,
                         presence: torch.Tensor, summaries: torch.Tensor,
                         rng: np.random.Generator):
    """Anchors and affinity codes for the instance-level contrast.

    pooled: (B, O, T', C) RoI features; presence (B, O, T) clip-level.
    """
    B, O, Tp, C = pooled.shape
    if Tp < 2:
        raise ShapeError("affinity contrast needs at least 2 pooled frames")
    present = presence.any(dim=-1)
    anchors = summaries[:, :O][present]
    feats = pooled[present]  # (N, T', C)
    z_true = encoder(torch.stack([affinity_sequence(f) for f in feats]))
    shuffled = []
    for f in feats:
        seq, degenerate = shuffled_affinity_sequence(f, rng)
        if seq is not None and not degenerate:
            shuffled.append(seq)
    z_shuffle = encoder(torch.stack(shuffled)) if shuffled else feats.new_zeros((0, z_true.shape[1]))
    return anchors, z_true, z_shuffle


def affinity_contrast_loss(object_summaries: torch.Tensor, codes_true: torch.Tensor,
                           codes_shuffled: torch.Tensor | None = None,
                           temperature: float | None = None) -> torch.Tensor:
    """Same InfoNCE structure as the trajectory contrast, on affinity codes."""
    return trajectory_contrast_loss(object_summaries, codes_true, codes_shuffled,
                                    temperature, warn_empty=False)


def class_contrast_loss(object_summaries: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Supervised contrast: same-label summaries (self included) are positives,
    different-label summaries negatives.

    term_j = -log sum_{k: l_k = l_j} exp(s_j.s_k) / sum_k exp(s_j.s_k)
    """
    if labels.unique().numel() < 2:
        warnings.warn("class contrast: batch has a single label; loss is 0 (no negatives)")
    sims = object_summaries @ object_summaries.T
    pos_mask = labels.unsqueeze(0) == labels.unsqueeze(1)
    num = sims.masked_fill(~pos_mask, float("-inf")).logsumexp(dim=1)
    den = sims.logsumexp(dim=1)
    return (den - num).sum()
