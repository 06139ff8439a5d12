"""Synthetic moving-shapes video worlds.

Each sample is a short clip of colored shapes on a dark background. The
action label (verb) is a motion pattern of the "agent" object (slot 0) and is
independent of shape identity (noun), which makes compositional, few-shot and
probe protocols expressible as split rules over (verb, noun) assignments.

Generation is a pure function of (world spec, sample index, split
restrictions): identical inputs produce bit-identical samples.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ConfigurationError, SplitError

VERBS = (
    "hold_still",
    "pulse_brightness",
    "left_to_right",
    "right_to_left",
    "approach_retreat",
    "circle",
    "swap",
    "shrink_grow",
)

# horizontal flip changes the label for these, so augmentation skips them
DIRECTION_DEPENDENT_VERBS = frozenset({"left_to_right", "right_to_left"})

SHAPES = ("square", "disk", "triangle", "diamond")
COLOR_VALUES = {
    "red": (0.85, 0.16, 0.16),
    "green": (0.18, 0.78, 0.22),
    "blue": (0.22, 0.34, 0.90),
}
NOUNS = tuple(f"{shape}_{color}" for shape in SHAPES for color in COLOR_VALUES)

RELATIONS = ("above", "below", "left_of", "right_of")


@dataclass(frozen=True)
class WorldSpec:
    """Generator configuration; the seed makes the whole world reproducible."""

    num_frames: int = 8
    height: int = 32
    width: int = 32
    num_objects: int = 3
    verb_catalog: tuple = VERBS
    noun_catalog: tuple = NOUNS
    seed: int = 0

    def validate(self):
        if self.num_frames % 2 != 0 or self.num_frames < 2:
            raise ConfigurationError(f"num_frames must be even and >= 2, got {self.num_frames}")
        if self.num_objects < 2:
            raise ConfigurationError(f"num_objects must be >= 2, got {self.num_objects}")
        if len(self.verb_catalog) < 4:
            raise ConfigurationError(f"verb_catalog needs >= 4 entries, got {len(self.verb_catalog)}")
        if len(self.noun_catalog) < 6:
            raise ConfigurationError(f"noun_catalog needs >= 6 entries, got {len(self.noun_catalog)}")
        for verb in self.verb_catalog:
            if verb not in VERBS:
                raise ConfigurationError(f"verb_catalog contains unknown motion pattern {verb!r}")
        for noun in self.noun_catalog:
            if noun not in NOUNS:
                raise ConfigurationError(f"noun_catalog contains unknown shape/color {noun!r}")

    def to_dict(self) -> dict:
        return {
            "num_frames": self.num_frames,
            "height": self.height,
            "width": self.width,
            "num_objects": self.num_objects,
            "verb_catalog": list(self.verb_catalog),
            "noun_catalog": list(self.noun_catalog),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(
            num_frames=d["num_frames"],
            height=d["height"],
            width=d["width"],
            num_objects=d["num_objects"],
            verb_catalog=tuple(d["verb_catalog"]),
            noun_catalog=tuple(d["noun_catalog"]),
            seed=d["seed"],
        )


@dataclass
class SampleRecord:
    """One rendered clip with ground-truth boxes and derived labels."""

    index: int
    frames: np.ndarray  # (T, H, W, 3) uint8
    boxes: np.ndarray  # (O, T, 4) float32, [x1, y1, x2, y2] in [0, 1]
    presence: np.ndarray  # (O, T) bool
    verb_label: int
    noun_labels: np.ndarray  # (O,) int32, -1 for absent slots
    contact_label: int  # 0 / 1 / 2+ non-agent objects ever overlapping the agent
    relation_labels: np.ndarray  # (O,) int32 into RELATIONS, -1 for agent/absent

    @property
    def clip(self) -> np.ndarray:
        """Frames as float32 rescaled to [-1, 1]."""
        return self.frames.astype(np.float32) / 127.5 - 1.0


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "standard"  # standard | compositional | fewshot
    train_nouns: tuple = ()
    test_nouns: tuple = ()
    base_verbs: tuple = ()
    novel_verbs: tuple = ()
    shots_per_class: int = 5

    def validate(self, spec: WorldSpec):
        if self.mode not in ("standard", "compositional", "fewshot"):
            raise SplitError(f"unknown split mode {self.mode!r}")
        if self.mode == "compositional":
            train, test = set(self.train_nouns), set(self.test_nouns)
            if not train or not test:
                raise SplitError("compositional mode needs non-empty train_nouns and test_nouns")
            if train & test:
                raise SplitError(f"compositional noun sets overlap: {sorted(train & test)}")
            all_nouns = set(range(len(spec.noun_catalog)))
            if not (train | test) <= all_nouns:
                raise SplitError("noun indices outside the world's noun catalog")
        if self.mode == "fewshot":
            base, novel = set(self.base_verbs), set(self.novel_verbs)
            if not base or not novel:
                raise SplitError("fewshot mode needs non-empty base_verbs and novel_verbs")
            if base & novel:
                raise SplitError(f"fewshot verb sets overlap: {sorted(base & novel)}")
            if self.shots_per_class < 1:
                raise SplitError(f"shots_per_class must be >= 1, got {self.shots_per_class}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "train_nouns": list(self.train_nouns),
            "test_nouns": list(self.test_nouns),
            "base_verbs": list(self.base_verbs),
            "novel_verbs": list(self.novel_verbs),
            "shots_per_class": self.shots_per_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            mode=d.get("mode", "standard"),
            train_nouns=tuple(d.get("train_nouns", ())),
            test_nouns=tuple(d.get("test_nouns", ())),
            base_verbs=tuple(d.get("base_verbs", ())),
            novel_verbs=tuple(d.get("novel_verbs", ())),
            shots_per_class=d.get("shots_per_class", 5),
        )


# ---------------------------------------------------------------------------
# rasterization


def _shape_mask(shape: str, cx: float, cy: float, r: float, height: int, width: int) -> np.ndarray:
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    if shape == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    if shape == "disk":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "diamond":
        return np.abs(xs - cx) + np.abs(ys - cy) <= r
    if shape == "triangle":
        # upward-pointing: apex at cy - r, base at cy + r
        inside_rows = (ys >= cy - r) & (ys <= cy + r)
        half_width = (ys - (cy - r)) / 2.0
        return inside_rows & (np.abs(xs - cx) <= half_width)
    raise ConfigurationError(f"unknown shape {shape!r}")


def _mask_bounds(mask: np.ndarray, height: int, width: int):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    x1 = cols[0] / width
    x2 = (cols[-1] + 1) / width
    y1 = rows[0] / height
    y2 = (rows[-1] + 1) / height
    return x1, y1, x2, y2


# ---------------------------------------------------------------------------
# motion synthesis (pixel-space center paths, per-frame radius and brightness)


def _triangle_wave(T: int) -> np.ndarray:
    half = T // 2
    t = np.arange(T, dtype=np.float64)
    return np.where(t <= half, t / half, (T - t) / (T - half))


def _motion_paths(verb: str, n_present: int, radii: np.ndarray, rng: np.random.Generator,
                  height: int, width: int, T: int):
    """Per-object center paths (n, T, 2) in pixels, radius (n, T) and brightness (n, T)."""
    lo = radii.max() + 1.5
    hi_x, hi_y = width - lo, height - lo

    def static_point():
        return np.array([rng.uniform(lo + 1, hi_x - 1), rng.uniform(lo + 1, hi_y - 1)])

    # spawn without initial overlaps: contact labels then reflect motion
    # geometry rather than placement accidents
    placed = []
    for i in range(n_present):
        point = static_point()
        for _ in range(40):
            clear = all(
                max(abs(point[0] - q[0]), abs(point[1] - q[1])) > radii[i] + radii[j] + 1.0
                for j, q in enumerate(placed)
            )
            if clear:
                break
            point = static_point()
        placed.append(point)
    centers = np.stack(placed)  # start positions
    paths = np.repeat(centers[:, None, :], T, axis=1)
    radius = np.repeat(radii[:, None], T, axis=1).astype(np.float64)
    brightness = np.ones((n_present, T))

    if verb == "hold_still":
        pass
    elif verb == "pulse_brightness":
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(T)
        brightness[0] = 1.0 - 0.7 * (0.5 - 0.5 * np.cos(2 * np.pi * t / T + phase))
    elif verb in ("left_to_right", "right_to_left"):
        # endpoints clamped before interpolation so the center path stays linear
        x0 = np.clip(width * rng.uniform(0.13, 0.19), lo + 0.5, hi_x - 0.5)
        x1 = np.clip(width * rng.uniform(0.81, 0.87), lo + 0.5, hi_x - 0.5)
        if verb == "right_to_left":
            x0, x1 = x1, x0
        y = rng.uniform(lo + 1, hi_y - 1)
        t = np.arange(T) / (T - 1)
        paths[0, :, 0] = x0 + (x1 - x0) * t
        paths[0, :, 1] = y
    elif verb == "approach_retreat":
        goal = paths[1, 0] + rng.uniform(-1.0, 1.0, size=2)  # deep overlap with the target
        u = _triangle_wave(T)
        paths[0] = paths[0, 0][None, :] + u[:, None] * (goal - paths[0, 0])[None, :]
    elif verb == "circle":
        rho = min(width, height) * rng.uniform(0.16, 0.24)
        rho = min(rho, (hi_x - lo) / 2 - 0.5, (hi_y - lo) / 2 - 0.5)
        rho = max(rho, 1.0)
        cx = rng.uniform(lo + rho, hi_x - rho)
        cy = rng.uniform(lo + rho, hi_y - rho)
        theta0 = rng.uniform(0, 2 * np.pi)
        direction = rng.choice((-1.0, 1.0))
        theta = theta0 + direction * 2 * np.pi * np.arange(T) / T
        paths[0, :, 0] = cx + rho * np.cos(theta)
        paths[0, :, 1] = cy + rho * np.sin(theta)
    elif verb == "swap":
        a, b = paths[0, 0].copy(), paths[1, 0].copy()
        t = (np.arange(T) / (T - 1))[:, None]
        paths[0] = a[None, :] * (1 - t) + b[None, :] * t
        paths[1] = b[None, :] * (1 - t) + a[None, :] * t
    elif verb == "shrink_grow":
        radius[0] = radii[0] * (1.0 - 0.55 * np.sin(np.pi * np.arange(T) / (T - 1)))
    else:
        raise ConfigurationError(f"unknown verb {verb!r}")

    paths[..., 0] = np.clip(paths[..., 0], lo, hi_x)
    paths[..., 1] = np.clip(paths[..., 1], lo, hi_y)
    return paths, radius, brightness


# ---------------------------------------------------------------------------
# label derivation


def _boxes_intersect(a, b) -> bool:
    """Positive-area intersection of two [x1, y1, x2, y2] boxes."""
    return (min(a[2], b[2]) > max(a[0], b[0])) and (min(a[3], b[3]) > max(a[1], b[1]))


def contact_label_from_boxes(boxes: np.ndarray, presence: np.ndarray) -> int:
    """Count non-agent objects whose box ever overlaps the agent's, bucketed to {0, 1, 2}."""
    O, T = presence.shape
    touching = 0
    for j in range(1, O):
        hit = any(
            presence[0, t] and presence[j, t] and _boxes_intersect(boxes[0, t], boxes[j, t])
            for t in range(T)
        )
        touching += int(hit)
    return min(touching, 2)


def relation_labels_from_boxes(boxes: np.ndarray, presence: np.ndarray) -> np.ndarray:
    """Dominant-axis spatial relation of each non-agent object w.r.t. the agent."""
    O, T = presence.shape
    labels = np.full(O, -1, dtype=np.int32)
    centers = (boxes[..., :2] + boxes[..., 2:]) / 2.0  # (O, T, 2)
    for j in range(1, O):
        both = presence[0] & presence[j]
        if not both.any():
            continue
        delta = (centers[j, both] - centers[0, both]).mean(axis=0)
        dx, dy = float(delta[0]), float(delta[1])
        if abs(dx) >= abs(dy):
            labels[j] = RELATIONS.index("left_of") if dx < 0 else RELATIONS.index("right_of")
        else:
            labels[j] = RELATIONS.index("above") if dy < 0 else RELATIONS.index("below")
    return labels


# ---------------------------------------------------------------------------
# sample generation


def generate_sample(spec: WorldSpec, index: int, allowed_verbs=None, allowed_nouns=None) -> SampleRecord:
    """Render sample `index`; pure in (spec, index, restrictions).

    `allowed_verbs` / `allowed_nouns` are index tuples into the world catalogs
    (used by split builders); labels are always global catalog indices.
    """
    spec.validate()
    if index < 0:
        raise ConfigurationError(f"sample index must be >= 0, got {index}")
    verbs = tuple(allowed_verbs) if allowed_verbs is not None else tuple(range(len(spec.verb_catalog)))
    nouns = tuple(allowed_nouns) if allowed_nouns is not None else tuple(range(len(spec.noun_catalog)))

    T, H, W, O = spec.num_frames, spec.height, spec.width, spec.num_objects
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))

    verb_label = verbs[index % len(verbs)]
    verb = spec.verb_catalog[verb_label]
    n_present = int(rng.integers(2, O + 1)) if O > 2 else 2

    noun_labels = np.full(O, -1, dtype=np.int32)
    noun_labels[:n_present] = rng.choice(nouns, size=n_present)

    size_scale = max(min(H, W) / 32.0, 0.45)
    radii = rng.uniform(2.6, 4.4, size=n_present) * size_scale
    if verb == "shrink_grow":
        radii[0] = rng.uniform(4.5, 6.0) * size_scale
    paths, radius, brightness = _motion_paths(verb, n_present, radii, rng, H, W, T)

    frames = np.zeros((T, H, W, 3), dtype=np.float64)
    bg = rng.uniform(0.05, 0.12)
    frames[:] = bg
    boxes = np.zeros((O, T, 4), dtype=np.float32)
    presence = np.zeros((O, T), dtype=bool)

    for t in range(T):
        masks = []
        for i in range(n_present):
            mask = _shape_mask(SHAPES[_shape_of(spec.noun_catalog[noun_labels[i]])],
                               paths[i, t, 0], paths[i, t, 1], radius[i, t], H, W)
            masks.append(mask)
            bounds = _mask_bounds(mask, H, W)
            if bounds is not None:
                boxes[i, t] = bounds
                presence[i, t] = True
        # later slots rendered first so the agent (slot 0) stays on top
        for i in reversed(range(n_present)):
            color = np.array(COLOR_VALUES[_color_of(spec.noun_catalog[noun_labels[i]])])
            frames[t][masks[i]] = color * brightness[i, t]

    frames_u8 = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)

    return SampleRecord(
        index=index,
        frames=frames_u8,
        boxes=boxes,
        presence=presence,
        verb_label=int(verb_label),
        noun_labels=noun_labels,
        contact_label=contact_label_from_boxes(boxes, presence),
        relation_labels=relation_labels_from_boxes(boxes, presence),
    )


def _shape_of(noun: str) -> int:
    return SHAPES.index(noun.rsplit("_", 1)[0])


def _color_of(noun: str) -> str:
    return noun.rsplit("_", 1)[1]


# ---------------------------------------------------------------------------
# splits


def build_split(spec: WorldSpec, split: SplitSpec, n_train: int, n_val: int):
    """Materialize (train, val) record lists under the split's restrictions."""
    spec.validate()
    split.validate(spec)
    if split.mode == "standard":
        train = [generate_sample(spec, i) for i in range(n_train)]
        val = [generate_sample(spec, n_train + i) for i in range(n_val)]
    elif split.mode == "compositional":
        n_verbs = len(spec.verb_catalog)
        if n_train < n_verbs or n_val < n_verbs:
            raise SplitError(f"need at least {n_verbs} samples per side so every verb appears")
        train = [generate_sample(spec, i, allowed_nouns=split.train_nouns) for i in range(n_train)]
        val = [
            generate_sample(spec, n_train + i, allowed_nouns=split.test_nouns)
            for i in range(n_val)
        ]
    elif split.mode == "fewshot":
        n_shots = split.shots_per_class * len(split.novel_verbs)
        train = [generate_sample(spec, i, allowed_verbs=split.novel_verbs) for i in range(n_shots)]
        val = [
            generate_sample(spec, n_shots + i, allowed_verbs=split.novel_verbs)
            for i in range(n_val)
        ]
    else:  # pragma: no cover - validate() already rejects
        raise SplitError(split.mode)
    return train, val


def build_fewshot_base(spec: WorldSpec, split: SplitSpec, n_train: int, n_val: int):
    """Base-verb pretraining split for the few-shot protocol."""
    split.validate(spec)
    if split.mode != "fewshot":
        raise SplitError("base split only defined for fewshot mode")
    # offset keeps base indices disjoint from the novel-shot indices
    offset = 10_000_000
    train = [generate_sample(spec, offset + i, allowed_verbs=split.base_verbs) for i in range(n_train)]
    val = [
        generate_sample(spec, offset + n_train + i, allowed_verbs=split.base_verbs)
        for i in range(n_val)
    ]
    return train, val


def noun_overlap(records_a, records_b) -> set:
    """Noun labels appearing on both sides (compositional leak scan)."""
    seen_a = set(int(n) for r in records_a for n in r.noun_labels if n >= 0)
    seen_b = set(int(n) for r in records_b for n in r.noun_labels if n >= 0)
    return seen_a & seen_b


# ---------------------------------------------------------------------------
# stacked array view used by training / evaluation


class SampleSet:
    """Records stacked into contiguous arrays for batched consumption."""

    def __init__(self, frames, boxes, presence, verb_labels, noun_labels, contact_labels,
                 relation_labels, indices):
        self.frames = frames
        self.boxes = boxes
        self.presence = presence
        self.verb_labels = verb_labels
        self.noun_labels = noun_labels
        self.contact_labels = contact_labels
        self.relation_labels = relation_labels
        self.indices = indices

    @classmethod
    def from_records(cls, records) -> "SampleSet":
        return cls(
            frames=np.stack([r.frames for r in records]),
            boxes=np.stack([r.boxes for r in records]),
            presence=np.stack([r.presence for r in records]),
            verb_labels=np.array([r.verb_label for r in records], dtype=np.int64),
            noun_labels=np.stack([r.noun_labels for r in records]),
            contact_labels=np.array([r.contact_label for r in records], dtype=np.int64),
            relation_labels=np.stack([r.relation_labels for r in records]),
            indices=np.array([r.index for r in records], dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.frames.shape[0]

    def clips(self, idx) -> np.ndarray:
        return self.frames[idx].astype(np.float32) / 127.5 - 1.0

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(
            index=int(self.indices[i]),
            frames=self.frames[i],
            boxes=self.boxes[i],
            presence=self.presence[i],
            verb_label=int(self.verb_labels[i]),
            noun_labels=self.noun_labels[i],
            contact_label=int(self.contact_labels[i]),
            relation_labels=self.relation_labels[i],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.frames, self.boxes, self.presence, self.verb_labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# on-disk datasets


def export_dataset(splits: dict, out_dir, spec: WorldSpec, split_spec: SplitSpec | None = None):
    """Write one record container per sample plus a JSONL manifest.

    `splits` maps split name -> list[SampleRecord] | SampleSet. Returns the
    manifest rows.
    """
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name, records in splits.items():
        if isinstance(records, SampleSet):
            records = [records.record(i) for i in range(len(records))]
        for i, rec in enumerate(records):
            rel = f"records/{split_name}-{i:06d}.rec"
            blob = write_container(
                out / rel,
                arrays={
                    "frames": rec.frames,
                    "boxes": rec.boxes,
                    "presence": rec.presence,
                    "noun_labels": rec.noun_labels,
                    "relation_labels": rec.relation_labels,
                },
                meta={"index": rec.index, "verb_label": rec.verb_label,
                      "contact_label": rec.contact_label},
            )
            rows.append({
                "id": f"{split_name}-{i:06d}",
                "split": split_name,
                "file": rel,
                "index": rec.index,
                "verb_label": rec.verb_label,
                "noun_labels": [int(n) for n in rec.noun_labels],
                "contact_label": rec.contact_label,
                "relation_labels": [int(n) for n in rec.relation_labels],
                "sha256": hashlib.sha256(blob).hexdigest(),
            })
    with open(out / "manifest.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    meta = {"world": spec.to_dict(), "splits": {k: len(v) for k, v in splits.items()}}
    if split_spec is not None:
        meta["split_spec"] = split_spec.to_dict()
    with open(out / "dataset.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return rows


def load_manifest(path) -> list:
    with open(Path(path) / "manifest.jsonl") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_dataset(path):
    """Reload an exported dataset. Returns (spec, {split: SampleSet}, meta)."""
    root = Path(path)
    try:
        with open(root / "dataset.json") as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"{root}: not a dataset directory ({e})") from e
    spec = WorldSpec.from_dict(meta["world"])
    records_by_split: dict = {}
    for row in load_manifest(root):
        arrays, rec_meta = read_container(root / row["file"])
        rec = SampleRecord(
            index=rec_meta["index"],
            frames=arrays["frames"],
            boxes=arrays["boxes"],
            presence=arrays["presence"].astype(bool),
            verb_label=rec_meta["verb_label"],
            noun_labels=arrays["noun_labels"],
            contact_label=rec_meta["contact_label"],
            relation_labels=arrays["relation_labels"],
        )
        records_by_split.setdefault(row["split"], []).append(rec)
    sets = {k: SampleSet.from_records(v) for k, v in records_by_split.items()}
    return spec, sets, meta
