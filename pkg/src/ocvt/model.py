"""Full model assembly: dual encoders, object learner, classification module,
the two classifiers, solo-stream heads for the independently-trained
baselines, and the auxiliary-loss code encoders.

The object-ID embedding table lives in the trajectory encoder and is passed
by reference into the object learner's query construction, so both modules
see the same parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ConfigurationError
from .heads import ClassificationModule, MlpClassifier, fuse_probabilities
from .losses import AffinityCodeEncoder, TrajectoryCodeEncoder
from .object_learner import ObjectLearner
from .trajectory_encoder import TrajectoryEncoder, TrajectoryFeatures
from .visual_encoder import FeatureVolume, VisualEncoder

# production-scale constants from the source architecture, for reference only
PAPER_SCALE = {
    "visual": {"dim": 768, "depth": 12, "heads": 12, "patch": (2, 16, 16), "tap_layer": 6},
    "object_learner": {"dim": 512, "ffn": 2048, "layers": 4, "heads": 4},
    "queries": {"objects": 5, "context": 3},
    "classification_module": {"layers": 2, "heads": 4},
}


@dataclass
class ModelConfig:
    num_classes: int = 8
    num_frames: int = 8
    height: int = 32
    width: int = 32
    num_objects: int = 3
    # visual encoder
    visual_dim: int = 64
    visual_depth: int = 4
    visual_heads: int = 4
    patch_size: int = 8
    tap_layer: int = 2
    # trajectory encoder
    traj_dim: int = 64
    spatial_layers: int = 2
    temporal_layers: int = 2
    traj_heads: int = 4
    temporal_stride: int = 2
    # object learner
    ol_dim: int = 64
    ol_layers: int = 4
    ol_heads: int = 4
    context_queries: int = 2
    # classification module
    cls_layers: int = 2
    cls_heads: int = 4
    # classifiers
    classifier_hidden: int | None = None  # None: hidden = input width
    # shared
    ffn_ratio: int = 4
    dropconnect: float = 0.2
    max_frames: int = 16
    with_aux_encoder: bool = True
    with_affinity_encoder: bool = False

    def validate(self):
        if self.temporal_stride != 2:
            raise ConfigurationError(
                "temporal_stride must be 2 to match the visual tokenizer's temporal patch"
            )
        if self.num_frames % 2 or self.num_frames > self.max_frames:
            raise ConfigurationError(
                f"num_frames {self.num_frames} must be even and <= max_frames {self.max_frames}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelOutputs:
    feature_volume: FeatureVolume
    traj_features: TrajectoryFeatures
    summaries: torch.Tensor  # (B, O+K, C_ol)
    c_obj: torch.Tensor
    logits_f1: torch.Tensor
    logits_f2: torch.Tensor

    @property
    def fused_probs(self) -> torch.Tensor:
        return fuse_probabilities(self.logits_f1, self.logits_f2)


class ObjectCentricVideoModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        drop = config.dropconnect
        self.visual = VisualEncoder(
            dim=config.visual_dim, depth=config.visual_depth, num_heads=config.visual_heads,
            height=config.height, width=config.width, patch_size=config.patch_size,
            max_frames=config.max_frames, tap_layer=config.tap_layer,
            ffn_ratio=config.ffn_ratio, dropconnect=drop,
        )
        self.trajectory = TrajectoryEncoder(
            dim=config.traj_dim, num_objects=config.num_objects,
            spatial_layers=config.spatial_layers, temporal_layers=config.temporal_layers,
            num_heads=config.traj_heads, max_frames=config.max_frames,
            temporal_stride=config.temporal_stride, ffn_ratio=config.ffn_ratio, dropconnect=drop,
        )
        self.object_learner = ObjectLearner(
            dim=config.ol_dim, num_layers=config.ol_layers, num_heads=config.ol_heads,
            num_objects=config.num_objects, num_context=config.context_queries,
            visual_dim=config.visual_dim, traj_dim=config.traj_dim,
            ffn_ratio=config.ffn_ratio, dropconnect=drop,
        )
        self.cls_module = ClassificationModule(
            dim=config.ol_dim, num_layers=config.cls_layers, num_heads=config.cls_heads,
            ffn_ratio=config.ffn_ratio, dropconnect=drop,
        )
        hidden = config.classifier_hidden
        self.head_visual = MlpClassifier(config.visual_dim, config.num_classes, hidden)
        self.head_traj = MlpClassifier(config.traj_dim, config.num_classes, hidden)
        self.f1 = MlpClassifier(config.visual_dim + config.traj_dim, config.num_classes, hidden)
        self.f2 = MlpClassifier(config.ol_dim, config.num_classes, hidden)
        self.g = (
            TrajectoryCodeEncoder(config.ol_dim, max_frames=config.max_frames,
                                  ffn_ratio=config.ffn_ratio)
            if config.with_aux_encoder else None
        )
        self.g_aff = (
            AffinityCodeEncoder(config.visual_dim, config.ol_dim,
                                max_frames=config.max_frames, ffn_ratio=config.ffn_ratio)
            if config.with_affinity_encoder else None
        )

    # -- forward paths ------------------------------------------------------

    def encode_streams(self, clip, boxes, presence, visual_grad: bool = True):
        if visual_grad:
            fv = self.visual(clip)
        else:
            with torch.no_grad():
                fv = self.visual(clip)
        tf = self.trajectory(boxes, presence)
        return fv, tf

    def fuse(self, fv: FeatureVolume, tf: TrajectoryFeatures) -> ModelOutputs:
        summaries = self.object_learner(fv.v, tf.G, self.trajectory.id_table, tf.kv_mask)
        c_obj = self.cls_module(summaries)
        logits_f1 = self.f1(torch.cat([fv.c_visual, tf.c_traj], dim=-1))
        logits_f2 = self.f2(c_obj)
        return ModelOutputs(feature_volume=fv, traj_features=tf, summaries=summaries,
                            c_obj=c_obj, logits_f1=logits_f1, logits_f2=logits_f2)

    def forward(self, clip, boxes, presence, visual_grad: bool = True) -> ModelOutputs:
        fv, tf = self.encode_streams(clip, boxes, presence, visual_grad)
        return self.fuse(fv, tf)

    def solo_logits(self, fv: FeatureVolume, tf: TrajectoryFeatures):
        return self.head_visual(fv.c_visual), self.head_traj(tf.c_traj)

    # -- staged-training support --------------------------------------------

    def stage_modules(self, stage: str) -> list:
        fusion = [self.trajectory, self.object_learner, self.cls_module, self.f1, self.f2]
        if self.g is not None:
            fusion.append(self.g)
        if self.g_aff is not None:
            fusion.append(self.g_aff)
        if stage == "backbones":
            return [self.visual, self.head_visual, self.trajectory, self.head_traj]
        if stage == "fusion":
            return fusion
        if stage == "end_to_end":
            return [self.visual, self.head_visual, self.head_traj] + fusion
        raise ConfigurationError(f"unknown training stage {stage!r}")

    def stage_parameters(self, stage: str):
        seen, params = set(), []
        for module in self.stage_modules(stage):
            for p in module.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params


def params_hash(module: nn.Module) -> str:
    """Content hash of all parameters (frozen-weights contract checks)."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
