"""Transfer evaluation on frozen representations: linear probes for the
contact-state and spatial-predicate tasks, the few-shot protocol (classifier
heads only), trajectory-shuffle discrimination, and attention-map export.

Probes never touch model parameters; extracted features are cached on disk
keyed by a content hash of the model parameters, so a different checkpoint
can never reuse a stale cache entry.
"""

from __future__ import annotations

import copy
import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import capture_attention
from .container import read_container, write_container
from .errors import ConfigurationError, ProbeSpecError, SplitError
from .losses import shuffle_trajectory
from .model import ObjectCentricVideoModel, params_hash
from .training import TrainConfig, cross_entropy_smoothed, evaluate, make_batch, _rng
from .worlds import RELATIONS, SampleSet

PER_VIDEO_SOURCES = ("summaries_mean", "backbone_cls_concat")
PER_OBJECT_SOURCES = ("summaries_plus_onehot_id",)
TASKS = ("contact_state", "predicate")


@dataclass
class ProbeSpec:
    task: str = "contact_state"
    feature_source: str = "summaries_mean"
    epochs: int = 300
    lr: float = 0.05
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self):
        if self.task not in TASKS:
            raise ProbeSpecError(f"unknown probe task {self.task!r}")
        if self.feature_source not in PER_VIDEO_SOURCES + PER_OBJECT_SOURCES:
            raise ProbeSpecError(f"unknown feature source {self.feature_source!r}")
        if self.task == "contact_state" and self.feature_source in PER_OBJECT_SOURCES:
            raise ProbeSpecError(
                f"per-video task {self.task!r} incompatible with per-object source "
                f"{self.feature_source!r}"
            )


@dataclass
class ProbeResult:
    task: str
    feature_source: str
    per_video_top1: float
    per_class_top1: float
    recall_at: dict = field(default_factory=dict)
    majority_baseline: float = 0.0
    beats_majority: bool = False
    n_val: int = 0


@dataclass
class FeatureTable:
    source: str
    features: np.ndarray  # (N, D) per video, or (N, O, D) per object
    per_object: bool


# ---------------------------------------------------------------------------
# frozen feature extraction


@torch.no_grad()
def extract_frozen_features(model: ObjectCentricVideoModel, samples: SampleSet, source: str,
                            batch_size: int = 64, cache_dir=None) -> FeatureTable:
    if source not in PER_VIDEO_SOURCES + PER_OBJECT_SOURCES:
        raise ProbeSpecError(f"unknown feature source {source!r}")
    cache_path = None
    if cache_dir is not None:
        key = hashlib.sha256(
            f"{params_hash(model)}|{source}|{samples.fingerprint()}".encode()
        ).hexdigest()[:24]
        cache_path = Path(cache_dir) / f"features-{key}.rec"
        if cache_path.exists():
            arrays, meta = read_container(cache_path)
            return FeatureTable(source=source, features=arrays["features"],
                                per_object=bool(meta["per_object"]))

    model.eval()
    O = model.config.num_objects
    chunks = []
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        batch = make_batch(samples, idx)
        fv, tf = model.encode_streams(batch["clip"], batch["boxes"], batch["presence"])
        if source == "backbone_cls_concat":
            feats = torch.cat([fv.c_visual, tf.c_traj], dim=-1)
        else:
            summaries = model.object_learner(fv.v, tf.G, model.trajectory.id_table, tf.kv_mask)
            objects = summaries[:, :O]
            if source == "summaries_mean":
                feats = objects.mean(dim=1)
            else:  # summaries_plus_onehot_id
                onehot = torch.eye(O, dtype=objects.dtype).unsqueeze(0).expand(
                    objects.shape[0], -1, -1)
                feats = torch.cat([objects, onehot], dim=-1)
        chunks.append(feats.numpy())
    features = np.concatenate(chunks).astype(np.float32)
    table = FeatureTable(source=source, features=features,
                         per_object=source in PER_OBJECT_SOURCES)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        write_container(cache_path, {"features": features},
                        meta={"per_object": table.per_object, "source": source})
    return table


def probe_inputs(table: FeatureTable, samples: SampleSet, task: str):
    """Flatten a feature table into (X, y) for the task.

    contact_state: one row per video, 3-way label.
    predicate: one row per (video, non-agent object); per-video sources get a
    one-hot object id appended, matching the frozen-CLS baseline protocol.
    """
    if task == "contact_state":
        if table.per_object:
            raise ProbeSpecError("per-video task incompatible with per-object features")
        return table.features, samples.contact_labels.astype(np.int64)
    if task != "predicate":
        raise ProbeSpecError(f"unknown probe task {task!r}")
    O = samples.relation_labels.shape[1]
    xs, ys = [], []
    for i in range(len(samples)):
        for j in range(O):
            label = int(samples.relation_labels[i, j])
            if label < 0:
                continue
            if table.per_object:
                xs.append(table.features[i, j])
            else:
                onehot = np.zeros(O, dtype=np.float32)
                onehot[j] = 1.0
                xs.append(np.concatenate([table.features[i], onehot]))
            ys.append(label)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


# ---------------------------------------------------------------------------
# linear probe


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class recalls (macro top-1)."""
    recalls = []
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            recalls.append(float((pred[mask] == c).mean()))
    return float(np.mean(recalls))


def linear_probe(train_table: FeatureTable, val_table: FeatureTable,
                 train_samples: SampleSet, val_samples: SampleSet,
                 spec: ProbeSpec) -> ProbeResult:
    """Train only a linear head on frozen features and report transfer metrics.

    Features are standardized with train-split statistics before the head."""
    spec.validate()
    x_train, y_train = probe_inputs(train_table, train_samples, spec.task)
    x_val, y_val = probe_inputs(val_table, val_samples, spec.task)
    if np.unique(y_train).size < 2:
        raise ProbeSpecError("probe training labels are single-class; nothing to separate")
    mu = x_train.mean(axis=0, keepdims=True)
    sd = x_train.std(axis=0, keepdims=True) + 1e-6
    x_train = (x_train - mu) / sd
    x_val = (x_val - mu) / sd
    num_classes = 3 if spec.task == "contact_state" else len(RELATIONS)

    torch.manual_seed(spec.seed)
    head = torch.nn.Linear(x_train.shape[1], num_classes)
    opt = torch.optim.Adam(head.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    xt = torch.from_numpy(x_train)
    if spec.task == "contact_state":
        yt = torch.from_numpy(y_train)
        loss_fn = lambda logits: torch.nn.functional.cross_entropy(logits, yt)
    else:
        # per-label binary CE with (degenerate) multi-hot targets
        targets = torch.zeros(len(y_train), num_classes)
        targets[torch.arange(len(y_train)), torch.from_numpy(y_train)] = 1.0
        loss_fn = lambda logits: torch.nn.functional.binary_cross_entropy_with_logits(
            logits, targets)
    for _ in range(spec.epochs):
        opt.zero_grad()
        loss_fn(head(xt)).backward()
        opt.step()

    with torch.no_grad():
        scores = head(torch.from_numpy(x_val)).numpy()
    pred = scores.argmax(axis=1)
    top1 = float((pred == y_val).mean())
    counts = np.bincount(y_train, minlength=num_classes)
    majority = float((y_val == counts.argmax()).mean())
    recall_at = {}
    if spec.task == "predicate":
        for k in (1, 2):
            topk = np.argsort(-scores, axis=1)[:, :k]
            recall_at[k] = float(np.mean([y in row for y, row in zip(y_val, topk)]))
    return ProbeResult(
        task=spec.task,
        feature_source=spec.feature_source,
        per_video_top1=top1,
        per_class_top1=per_class_accuracy(pred, y_val, num_classes),
        recall_at=recall_at,
        majority_baseline=majority,
        beats_majority=top1 > majority,
        n_val=len(y_val),
    )


def run_probe(model: ObjectCentricVideoModel, train_samples: SampleSet, val_samples: SampleSet,
              spec: ProbeSpec, cache_dir=None) -> ProbeResult:
    spec.validate()
    train_table = extract_frozen_features(model, train_samples, spec.feature_source,
                                          cache_dir=cache_dir)
    val_table = extract_frozen_features(model, val_samples, spec.feature_source,
                                        cache_dir=cache_dir)
    return linear_probe(train_table, val_table, train_samples, val_samples, spec)


# ---------------------------------------------------------------------------
# few-shot protocol


def fewshot_finetune(model: ObjectCentricVideoModel, novel_train: SampleSet,
                     novel_val: SampleSet, novel_verbs, config: TrainConfig | None = None,
                     kind: str = "fused"):
    """Freeze everything except the classifiers, re-initialize their output
    layers for the novel class set, train on the shots, and report accuracy.

    kind="fused" tunes f1/f2 and reports the fused prediction;
    kind="visual_only" tunes the solo visual head.
    Returns (report dict, finetuned model copy).
    """
    if config is None:
        config = TrainConfig(epochs=100, base_lr=1e-2, batch_size=64, augment=False)
    novel = sorted(int(v) for v in novel_verbs)
    base_classes = model.config.num_classes
    if any(int(l) not in novel for l in novel_train.verb_labels):
        raise SplitError("novel split contains labels outside the declared novel verb set")
    remap = {verb: i for i, verb in enumerate(novel)}

    model = copy.deepcopy(model)
    torch.manual_seed(config.seed)
    if kind == "fused":
        model.f1.reinit_output(len(novel))
        model.f2.reinit_output(len(novel))
        trainable = list(model.f1.parameters()) + list(model.f2.parameters())
    elif kind == "visual_only":
        model.head_visual.reinit_output(len(novel))
        trainable = list(model.head_visual.parameters())
    else:
        raise ConfigurationError(f"unknown few-shot kind {kind!r}")
    trainable_ids = {id(p) for p in trainable}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable_ids)

    def remapped(labels):
        return torch.tensor([remap[int(l)] for l in labels], dtype=torch.int64)

    opt = torch.optim.AdamW(trainable, lr=config.base_lr, weight_decay=config.weight_decay)
    n = len(novel_train)
    model.eval()  # feature extractors stay in inference mode; only heads train
    for epoch in range(1, config.epochs + 1):
        order = _rng(config.seed, epoch, 0).permutation(n)
        for start in range(0, n, config.batch_size):
            batch = make_batch(novel_train, order[start : start + config.batch_size])
            labels = remapped(batch["labels"])
            with torch.no_grad():
                fv, tf = model.encode_streams(batch["clip"], batch["boxes"], batch["presence"])
                summaries = model.object_learner(fv.v, tf.G, model.trajectory.id_table, tf.kv_mask)
                c_obj = model.cls_module(summaries)
            opt.zero_grad()
            if kind == "fused":
                logits_f1 = model.f1(torch.cat([fv.c_visual, tf.c_traj], dim=-1))
                logits_f2 = model.f2(c_obj)
                loss = (cross_entropy_smoothed(logits_f1, labels, config.label_smoothing)
                        + cross_entropy_smoothed(logits_f2, labels, config.label_smoothing))
            else:
                loss = cross_entropy_smoothed(model.head_visual(fv.c_visual), labels,
                                              config.label_smoothing)
            loss.backward()
            opt.step()

    # evaluation over the remapped novel classes
    correct, total = 0, 0
    with torch.no_grad():
        for start in range(0, len(novel_val), 256):
            idx = np.arange(start, min(start + 256, len(novel_val)))
            batch = make_batch(novel_val, idx)
            labels = remapped(batch["labels"])
            fv, tf = model.encode_streams(batch["clip"], batch["boxes"], batch["presence"])
            if kind == "fused":
                out = model.fuse(fv, tf)
                probs = out.fused_probs
            else:
                probs = model.head_visual(fv.c_visual).softmax(-1)
            correct += int((probs.argmax(-1) == labels).sum())
            total += len(idx)
    report = {
        "kind": kind,
        "top1": correct / total,
        "n_novel_classes": len(novel),
        "n_shots": n,
        "base_classes": base_classes,
    }
    return report, model


# ---------------------------------------------------------------------------
# shuffle discrimination (auxiliary-loss sanity on held-out data)


@torch.no_grad()
def shuffle_discrimination_rate(model: ObjectCentricVideoModel, samples: SampleSet,
                                seed: int = 0, batch_size: int = 64) -> dict:
    """Fraction of present, non-static objects whose summary scores the true
    trajectory code above a shuffled one."""
    if model.g is None:
        raise ConfigurationError("model was built without the trajectory-code encoder")
    model.eval()
    rng = _rng(seed, 99)
    wins = total = 0
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        batch = make_batch(samples, idx)
        boxes, presence = batch["boxes"], batch["presence"]
        out = model(batch["clip"], boxes, presence)
        O = model.config.num_objects
        present = presence.any(dim=-1)
        for b in range(boxes.shape[0]):
            for j in range(O):
                if not present[b, j]:
                    continue
                shuffled, _, degenerate = shuffle_trajectory(boxes[b, j], rng)
                if degenerate:
                    continue
                s = out.summaries[b, j]
                z_true = model.g(boxes[b, j].unsqueeze(0))[0]
                z_shuffle = model.g(shuffled.unsqueeze(0))[0]
                wins += int(torch.dot(s, z_true) > torch.dot(s, z_shuffle))
                total += 1
    return {"rate": wins / max(total, 1), "n_objects": total}


# ---------------------------------------------------------------------------
# attention export


def _ol_stage1_records(model: ObjectCentricVideoModel, batch: dict):
    """Stage-1 cross-attention weights of every object-learner layer for one batch."""
    ol_attns = [block.attn for block in model.object_learner.blocks]
    model.eval()
    with torch.no_grad(), capture_attention(model.object_learner) as mods:
        model(batch["clip"], batch["boxes"], batch["presence"])
        records = []
        for layer, mod in enumerate(m for m in mods if m in ol_attns):
            stage1 = [e["weights"] for e in mod.captured if e["kind"] == "traj_stage1"]
            records.append(stage1[0])  # (B, heads, Q, T', S_kv)
    return records


def export_attention(model: ObjectCentricVideoModel, samples: SampleSet, sample_ids,
                     out_dir, overlay: bool = True) -> list:
    """Write per-(sample, layer, head, object-query) heatmap PNGs and raw
    stage-1 weight CSVs. Returns the written file paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gh, gw = model.visual.grid
    patch = model.config.patch_size
    stride = model.config.temporal_stride
    O = model.config.num_objects
    written = []
    for sid in sample_ids:
        batch = make_batch(samples, np.array([sid]))
        records = _ol_stage1_records(model, batch)
        frames = samples.frames[sid]
        for layer, weights in enumerate(records):
            w = weights[0]  # (heads, Q, T', S_kv)
            n_heads, n_queries, Tp, S_kv = w.shape
            for head in range(n_heads):
                for q in range(min(n_queries, O)):
                    tag = f"s{sid:05d}_L{layer}_h{head}_q{q}"
                    csv_path = out / f"{tag}.csv"
                    with open(csv_path, "w", newline="") as f:
                        writer = csv.writer(f)
                        writer.writerow(["t", "s", "weight"])
                        for t in range(Tp):
                            for s in range(S_kv):
                                writer.writerow([t, s, format(float(w[head, q, t, s]), ".9g")])
                    written.append(str(csv_path))
                    fig, axes = plt.subplots(1, Tp, figsize=(2.2 * Tp, 2.4))
                    axes = np.atleast_1d(axes)
                    for t in range(Tp):
                        heat = w[head, q, t, : gh * gw].reshape(gh, gw).numpy()
                        up = np.kron(heat, np.ones((patch, patch)))
                        ax = axes[t]
                        if overlay:
                            ax.imshow(frames[t * stride])
                        ax.imshow(up, alpha=0.6, cmap="inferno")
                        ax.set_title(f"t'={t}", fontsize=8)
                        ax.axis("off")
                    fig.suptitle(f"sample {sid} layer {layer} head {head} query {q}", fontsize=9)
                    png_path = out / f"{tag}.png"
                    fig.savefig(png_path, dpi=80, bbox_inches="tight")
                    plt.close(fig)
                    written.append(str(png_path))
    return written


def read_attention_csv(path) -> np.ndarray:
    """Reload a weight CSV into a (T', S_kv) float32 array."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append((int(row["t"]), int(row["s"]), np.float32(row["weight"])))
    Tp = max(r[0] for r in rows) + 1
    S = max(r[1] for r in rows) + 1
    out = np.zeros((Tp, S), dtype=np.float32)
    for t, s, v in rows:
        out[t, s] = v
    return out


def attention_mass_stats(model: ObjectCentricVideoModel, samples: SampleSet, sample_ids,
                         layer: int = -1, move_threshold: float = 1e-3) -> list:
    """Per (sample, object, window): the head-averaged fraction of visual
    attention mass inside the GT box versus the box's area fraction.

    `moving` marks windows where the box center displaces by more than
    `move_threshold` between the window's consecutive source frames.
    """
    gh, gw = model.visual.grid
    stride = model.config.temporal_stride
    O = model.config.num_objects
    cols = (np.arange(gw) + 0.5) / gw
    rows_c = (np.arange(gh) + 0.5) / gh
    cx = np.tile(cols, gh)
    cy = np.repeat(rows_c, gw)
    stats = []
    for sid in sample_ids:
        batch = make_batch(samples, np.array([sid]))
        weights = _ol_stage1_records(model, batch)[layer][0]  # (heads, Q, T', S_kv)
        head_mean = weights.mean(dim=0).numpy()  # (Q, T', S_kv)
        boxes = samples.boxes[sid]
        presence = samples.presence[sid]
        Tp = head_mean.shape[1]
        for j in range(O):
            for t in range(Tp):
                f0 = t * stride
                if not presence[j, f0]:
                    continue
                x1, y1, x2, y2 = boxes[j, f0]
                inside = (cx >= x1) & (cx <= x2) & (cy >= y1) & (cy <= y2)
                visual = head_mean[j, t, : gh * gw]
                visual_mass = float(visual.sum())
                if visual_mass <= 0:
                    continue
                frames_in_window = range(f0, min(f0 + stride, boxes.shape[1]))
                centers = [(boxes[j, f, :2] + boxes[j, f, 2:]) / 2 for f in frames_in_window
                           if presence[j, f]]
                moving = any(
                    np.abs(centers[i + 1] - centers[i]).max() > move_threshold
                    for i in range(len(centers) - 1)
                )
                stats.append({
                    "sample": int(sid),
                    "object": j,
                    "window": t,
                    "mass_in_box": float(visual[inside].sum()) / visual_mass,
                    "area_fraction": float((x2 - x1) * (y2 - y1)),
                    "moving": bool(moving),
                })
    return stats
