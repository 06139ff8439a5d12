"""Seeded training loop with the staged recipe: backbones train first with
their own classifiers, then the visual encoder is frozen while the trajectory
encoder, object learner, classification module and classifiers train with the
full objective. An end_to_end stage exists for configurations small enough to
train jointly.

Determinism contract: epoch data order, augmentation draws and trajectory
shuffles are derived statelessly from (seed, epoch, step); torch RNG state is
captured in checkpoints, so save -> load -> one step equals an uninterrupted
step bit-exactly on the same platform.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .heads import fuse_probabilities
from .losses import (
    build_affinity_codes,
    build_trajectory_codes,
    class_contrast_loss,
    cross_entropy_smoothed,
    roi_pool,
    total_loss,
    trajectory_contrast_loss,
)
from .model import ModelConfig, ObjectCentricVideoModel, params_hash
from .worlds import DIRECTION_DEPENDENT_VERBS, SampleSet, WorldSpec

STAGES = ("backbones", "fusion", "end_to_end")


@dataclass
class TrainConfig:
    """Defaults mirror the published recipe (AdamW, 35 epochs, base lr 3.75e-5
    decayed x0.1 at epoch 20 and x0.01 at epoch 30, weight decay 1e-3, label
    smoothing 0.2, DropConnect 0.2); desk-scale experiments override them."""

    base_lr: float = 3.75e-5
    weight_decay: float = 1e-3
    epochs: int = 35
    lr_decay_points: tuple = ((20, 0.1), (30, 0.01))
    label_smoothing: float = 0.2
    dropconnect: float = 0.2
    batch_size: int = 32
    stage: str = "fusion"
    aux: bool = True
    aff: bool = False
    obj_contrast: bool = False
    seed: int = 0
    n_shuffles: int = 1
    temperature: float | None = None
    aux_weight: float = 1.0
    aff_weight: float = 1.0
    obj_weight: float = 1.0
    augment: bool = True
    jitter: int = 2
    grad_accumulation: int = 1

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(f"label_smoothing outside [0, 1): {self.label_smoothing}")
        if self.batch_size < 1 or self.epochs < 0 or self.grad_accumulation < 1:
            raise ConfigurationError("batch_size/epochs/grad_accumulation out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_points"] = [list(p) for p in self.lr_decay_points]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_decay_points"] = tuple(tuple(p) for p in d.get("lr_decay_points", ()))
        return cls(**d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch: the factor of the last passed decay point."""
    factor = 1.0
    for point, f in config.lr_decay_points:
        if epoch > point:
            factor = f
    return config.base_lr * factor


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------------------
# batch assembly and augmentation


def flip_invariant_labels(world: WorldSpec | None):
    if world is None:
        return None
    return frozenset(
        i for i, v in enumerate(world.verb_catalog) if v not in DIRECTION_DEPENDENT_VERBS
    )


def augment_batch(frames, boxes, labels, rng: np.random.Generator, jitter: int,
                  flip_ok=None):
    """Box-consistent spatial jitter plus horizontal flips on flip-invariant classes."""
    n, T, H, W, _ = frames.shape
    frames = frames.copy()
    boxes = boxes.copy()
    for i in range(n):
        if jitter > 0:
            dx = int(rng.integers(-jitter, jitter + 1))
            dy = int(rng.integers(-jitter, jitter + 1))
            if dx or dy:
                padded = np.pad(frames[i], ((0, 0), (jitter, jitter), (jitter, jitter), (0, 0)),
                                mode="edge")
                frames[i] = padded[:, jitter - dy : jitter - dy + H, jitter - dx : jitter - dx + W]
                shifted = boxes[i].copy()
                shifted[..., (0, 2)] += dx / W
                shifted[..., (1, 3)] += dy / H
                boxes[i] = np.clip(shifted, 0.0, 1.0)
        if flip_ok is not None and int(labels[i]) in flip_ok and rng.random() < 0.5:
            frames[i] = frames[i][:, :, ::-1]
            x1 = boxes[i][..., 0].copy()
            boxes[i][..., 0] = 1.0 - boxes[i][..., 2]
            boxes[i][..., 2] = 1.0 - x1
    return frames, boxes


def make_batch(samples: SampleSet, idx: np.ndarray, rng: np.random.Generator | None = None,
               jitter: int = 0, flip_ok=None, device=None):
    frames = samples.frames[idx]
    boxes = samples.boxes[idx]
    labels = samples.verb_labels[idx]
    if rng is not None:
        frames, boxes = augment_batch(frames, boxes, labels, rng, jitter, flip_ok)
    clip = torch.from_numpy(np.ascontiguousarray(frames)).float().div_(127.5).sub_(1.0)
    batch = {
        "clip": clip,
        "boxes": torch.from_numpy(np.ascontiguousarray(boxes)),
        "presence": torch.from_numpy(samples.presence[idx]),
        "labels": torch.from_numpy(labels),
    }
    if device is not None:
        batch = {k: v.to(device) for k, v in batch.items()}
    return batch


# ---------------------------------------------------------------------------
# stage objectives


def compute_stage_loss(model: ObjectCentricVideoModel, batch: dict, config: TrainConfig,
                       shuffle_rng: np.random.Generator):
    """Returns (total tensor, named scalar terms) for the configured stage."""
    alpha = config.label_smoothing
    clip, boxes, presence, labels = (
        batch["clip"], batch["boxes"], batch["presence"], batch["labels"],
    )
    if config.stage == "backbones":
        fv = model.visual(clip)
        tf = model.trajectory(boxes, presence)
        logits_v, logits_t = model.solo_logits(fv, tf)
        ce_v = cross_entropy_smoothed(logits_v, labels, alpha)
        ce_t = cross_entropy_smoothed(logits_t, labels, alpha)
        breakdown = total_loss(ce_backbone=ce_v, ce_object=ce_t)
        terms = {"ce_visual": float(ce_v.detach()), "ce_traj": float(ce_t.detach()),
                 "total": float(breakdown.total.detach())}
        return breakdown.total, terms

    visual_grad = config.stage == "end_to_end"
    out = model(clip, boxes, presence, visual_grad=visual_grad)
    ce1 = cross_entropy_smoothed(out.logits_f1, labels, alpha)
    ce2 = cross_entropy_smoothed(out.logits_f2, labels, alpha)
    aux = aff = obj = None
    if config.aux:
        anchors, z_true, z_shuffle = build_trajectory_codes(
            model.g, boxes, presence, out.summaries, shuffle_rng, config.n_shuffles
        )
        aux = config.aux_weight * trajectory_contrast_loss(
            anchors, z_true, z_shuffle, config.temperature, warn_empty=False)
    if config.aff:
        pooled, _ = roi_pool(out.feature_volume.v, out.feature_volume.grid, boxes, presence,
                             stride=model.config.temporal_stride)
        anchors, z_true, z_shuffle = build_affinity_codes(
            model.g_aff, pooled, presence, out.summaries, shuffle_rng
        )
        aff = config.aff_weight * trajectory_contrast_loss(
            anchors, z_true, z_shuffle, config.temperature, warn_empty=False)
    if config.obj_contrast:
        present = presence.any(dim=-1)
        anchors = out.summaries[:, : model.config.num_objects][present]
        obj_labels = labels.unsqueeze(1).expand(-1, model.config.num_objects)[present]
        obj = config.obj_weight * class_contrast_loss(anchors, obj_labels)
    breakdown = total_loss(ce1, ce2, aux=aux, aff=aff, obj_contrast=obj)
    return breakdown.total, breakdown.scalars()


# ---------------------------------------------------------------------------
# evaluation


def top_k_accuracy(probs: torch.Tensor, labels: torch.Tensor, k: int) -> float:
    k = min(k, probs.shape[-1])
    top = probs.topk(k, dim=-1).indices
    return float((top == labels.unsqueeze(-1)).any(dim=-1).float().mean())


@torch.no_grad()
def evaluate(model: ObjectCentricVideoModel, samples: SampleSet, batch_size: int = 64,
             dump_path=None) -> dict:
    """Top-1/top-5 for the fused prediction plus every single-stream breakdown."""
    model.eval()
    all_probs = {"fused": [], "f1": [], "f2": [], "visual": [], "traj": [], "avg_prob": []}
    all_labels = []
    order = np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        batch = make_batch(samples, order[start : start + batch_size])
        fv, tf = model.encode_streams(batch["clip"], batch["boxes"], batch["presence"])
        out = model.fuse(fv, tf)
        logits_v, logits_t = model.solo_logits(fv, tf)
        all_probs["fused"].append(out.fused_probs)
        all_probs["f1"].append(out.logits_f1.softmax(-1))
        all_probs["f2"].append(out.logits_f2.softmax(-1))
        all_probs["visual"].append(logits_v.softmax(-1))
        all_probs["traj"].append(logits_t.softmax(-1))
        all_probs["avg_prob"].append(fuse_probabilities(logits_v, logits_t))
        all_labels.append(batch["labels"])
    labels = torch.cat(all_labels)
    probs = {k: torch.cat(v) for k, v in all_probs.items()}
    report = {
        "n": int(labels.numel()),
        "top1": top_k_accuracy(probs["fused"], labels, 1),
        "top5": top_k_accuracy(probs["fused"], labels, 5),
        "f1_top1": top_k_accuracy(probs["f1"], labels, 1),
        "f2_top1": top_k_accuracy(probs["f2"], labels, 1),
        "visual_top1": top_k_accuracy(probs["visual"], labels, 1),
        "traj_top1": top_k_accuracy(probs["traj"], labels, 1),
        "avg_prob_top1": top_k_accuracy(probs["avg_prob"], labels, 1),
    }
    if dump_path is not None:
        with open(dump_path, "w") as f:
            for i in range(labels.numel()):
                row = {
                    "i": i,
                    "label": int(labels[i]),
                    "fused": [float(x) for x in probs["fused"][i]],
                    "f1": [float(x) for x in probs["f1"][i]],
                    "f2": [float(x) for x in probs["f2"][i]],
                }
                f.write(json.dumps(row) + "\n")
    return report


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model: ObjectCentricVideoModel, optimizer, train_config: TrainConfig,
                    epoch: int, step: int, extra: dict | None = None):
    payload = {
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "torch_rng": torch.get_rng_state(),
        "num_classes": model.config.num_classes,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path):
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(path) -> tuple:
    payload = load_checkpoint(path)
    model = ObjectCentricVideoModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    return model, payload


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: ObjectCentricVideoModel
    metrics: list = field(default_factory=list)
    checkpoint_path: str | None = None
    final_val: dict | None = None


def _freeze_for_stage(model: ObjectCentricVideoModel, stage: str):
    trainable = {id(p) for p in model.stage_parameters(stage)}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)


def train(train_config: TrainConfig, model_config: ModelConfig | None = None,
          train_set: SampleSet | None = None, val_set: SampleSet | None = None,
          out_dir=None, model: ObjectCentricVideoModel | None = None,
          world: WorldSpec | None = None, start_epoch: int = 0,
          optimizer_state=None) -> TrainResult:
    """Run the configured stage. Either `model` (possibly pre-trained) or
    `model_config` must be given; with `out_dir` set, a checkpoint, per-epoch
    metrics and per-step loss-term lines are written there."""
    train_config.validate()
    if train_set is None or len(train_set) == 0:
        raise ConfigurationError("train() needs a non-empty train_set")
    if start_epoch == 0:
        # resumed runs arrive with the checkpointed RNG state already restored
        torch.manual_seed(train_config.seed)
    if model is None:
        if model_config is None:
            raise ConfigurationError("either model or model_config is required")
        model_config = copy.deepcopy(model_config)
        model_config.dropconnect = train_config.dropconnect
        model = ObjectCentricVideoModel(model_config)

    _freeze_for_stage(model, train_config.stage)
    frozen_visual = train_config.stage == "fusion"
    optimizer = torch.optim.AdamW(
        model.stage_parameters(train_config.stage),
        lr=train_config.base_lr,
        weight_decay=train_config.weight_decay,
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    out = Path(out_dir) if out_dir is not None else None
    metrics_f = losses_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if start_epoch > 0 else "w"
        metrics_f = open(out / "metrics.jsonl", mode)
        losses_f = open(out / "losses.jsonl", mode)

    flip_ok = flip_invariant_labels(world) if train_config.augment else None
    n = len(train_set)
    steps_per_epoch = (n + train_config.batch_size - 1) // train_config.batch_size
    metrics_rows = []
    global_step = start_epoch * steps_per_epoch

    try:
        for epoch in range(start_epoch + 1, train_config.epochs + 1):
            lr = lr_at_epoch(train_config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            if frozen_visual:
                model.visual.eval()
            order = _rng(train_config.seed, epoch, 0).permutation(n)
            term_sums: dict = {}
            for step in range(steps_per_epoch):
                idx = order[step * train_config.batch_size : (step + 1) * train_config.batch_size]
                aug_rng = _rng(train_config.seed, epoch, step, 1) if train_config.augment else None
                shuffle_rng = _rng(train_config.seed, epoch, step, 2)
                batch = make_batch(train_set, idx, aug_rng, train_config.jitter, flip_ok)
                loss, terms = compute_stage_loss(model, batch, train_config, shuffle_rng)
                (loss / train_config.grad_accumulation).backward()
                if (step + 1) % train_config.grad_accumulation == 0 or step == steps_per_epoch - 1:
                    optimizer.step()
                    optimizer.zero_grad(set_to_none=True)
                global_step += 1
                for name, value in terms.items():
                    term_sums[name] = term_sums.get(name, 0.0) + value
                    if losses_f is not None:
                        losses_f.write(json.dumps(
                            {"step": global_step, "term": name, "value": value}) + "\n")
            row = {"epoch": epoch, "lr": lr}
            row.update({f"loss_{k}": v / steps_per_epoch for k, v in term_sums.items()})
            if val_set is not None and len(val_set):
                val_report = evaluate(model, val_set, batch_size=train_config.batch_size)
                row.update({f"val_{k}": v for k, v in val_report.items()})
            metrics_rows.append(row)
            if metrics_f is not None:
                metrics_f.write(json.dumps(row) + "\n")
                metrics_f.flush()
            if out is not None:
                save_checkpoint(out / "checkpoint.pt", model, optimizer, train_config,
                                epoch, global_step)
    finally:
        if metrics_f is not None:
            metrics_f.close()
        if losses_f is not None:
            losses_f.close()

    final_val = evaluate(model, val_set) if val_set is not None and len(val_set) else None
    return TrainResult(
        model=model,
        metrics=metrics_rows,
        checkpoint_path=str(out / "checkpoint.pt") if out is not None else None,
        final_val=final_val,
    )


def resume_training(checkpoint_path, train_set: SampleSet, val_set: SampleSet | None = None,
                    out_dir=None, epochs: int | None = None,
                    world: WorldSpec | None = None) -> TrainResult:
    """Continue a run from a saved checkpoint, restoring optimizer moments and
    torch RNG state so the continuation matches an uninterrupted run."""
    payload = load_checkpoint(checkpoint_path)
    model = ObjectCentricVideoModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    config = TrainConfig.from_dict(payload["train_config"])
    if epochs is not None:
        config.epochs = epochs
    torch.set_rng_state(payload["torch_rng"])
    return train(config, train_set=train_set, val_set=val_set, out_dir=out_dir, model=model,
                 world=world, start_epoch=payload["epoch"],
                 optimizer_state=payload["optimizer_state"])


# ---------------------------------------------------------------------------
# ablation grids


BACKBONE_KEYS = {
    "visual_dim", "visual_depth", "visual_heads", "patch_size", "tap_layer", "traj_dim",
    "spatial_layers", "temporal_layers", "traj_heads", "num_frames", "height", "width",
}


def apply_delta(model_config: ModelConfig, train_config: TrainConfig, delta: dict):
    mc = copy.deepcopy(model_config)
    tc = copy.deepcopy(train_config)
    for key, value in delta.items():
        if hasattr(mc, key):
            setattr(mc, key, value)
        elif hasattr(tc, key):
            setattr(tc, key, value)
        else:
            raise ConfigurationError(f"ablation delta key {key!r} matches no config field")
    mc.with_aux_encoder = tc.aux
    mc.with_affinity_encoder = tc.aff
    return mc, tc


def run_ablation(model_config: ModelConfig, train_config: TrainConfig, grid: list,
                 seeds, train_set: SampleSet, val_set: SampleSet,
                 world: WorldSpec | None = None, stage1_epochs: int | None = None) -> list:
    """Train every (delta, seed) cell and report OL-only / backbone-only /
    fused accuracies as mean +/- sample std over the shared seeds. Backbones
    are trained once per seed and reused across cells that do not touch them."""
    rows = []
    backbone_cache: dict = {}
    for delta in grid:
        cell = {"delta": dict(delta), "seeds": list(seeds), "ol_only": [], "backbone_only": [],
                "fused": [], "error": None}
        for seed in seeds:
            try:
                mc, tc = apply_delta(model_config, train_config, delta)
                tc.seed = seed
                cache_key = (seed,) + tuple(sorted(
                    (k, v) for k, v in delta.items() if k in BACKBONE_KEYS))
                if cache_key not in backbone_cache:
                    s1 = copy.deepcopy(tc)
                    s1.stage = "backbones"
                    if stage1_epochs is not None:
                        s1.epochs = stage1_epochs
                    result = train(s1, mc, train_set, val_set, world=world)
                    backbone_cache[cache_key] = result.model
                torch.manual_seed(tc.seed)  # transplant builds fresh fusion modules
                fused_model = _transplant_backbones(mc, backbone_cache[cache_key])
                tc.stage = "fusion"
                result = train(tc, train_set=train_set, val_set=val_set, model=fused_model,
                               world=world)
                report = result.final_val
                cell["ol_only"].append(report["f2_top1"])
                cell["backbone_only"].append(report["f1_top1"])
                cell["fused"].append(report["top1"])
            except Exception as e:  # noqa: BLE001 - cell failures are reported, not fatal
                cell["error"] = f"{type(e).__name__}: {e}"
                break
        for col in ("ol_only", "backbone_only", "fused"):
            vals = cell[col]
            cell[col] = {
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0 if vals else None,
            }
        rows.append(cell)
    return rows


def _transplant_backbones(model_config: ModelConfig, source: ObjectCentricVideoModel):
    """Fresh model with `source`'s trained encoders and solo heads carried over.

    The solo heads keep their trained shapes even if the new config sizes the
    fusion classifiers differently."""
    model = ObjectCentricVideoModel(copy.deepcopy(model_config))
    model.visual.load_state_dict(source.visual.state_dict())
    model.trajectory.load_state_dict(source.trajectory.state_dict())
    model.head_visual = copy.deepcopy(source.head_visual)
    model.head_traj = copy.deepcopy(source.head_traj)
    return model


def format_ablation_table(rows: list) -> str:
    lines = [f"{'config':<40} {'OL only':>12} {'backbone':>12} {'fused':>12}"]
    for cell in rows:
        name = ", ".join(f"{k}={v}" for k, v in cell["delta"].items()) or "(base)"
        if cell["error"]:
            lines.append(f"{name:<40} FAILED: {cell['error']}")
            continue
        def fmt(col):
            stats = cell[col]
            return f"{stats['mean']*100:5.1f}+/-{stats['std']*100:4.1f}"
        lines.append(f"{name:<40} {fmt('ol_only'):>12} {fmt('backbone_only'):>12} {fmt('fused'):>12}")
    return "\n".join(lines)
