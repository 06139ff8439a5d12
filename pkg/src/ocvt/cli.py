"""Command-line entry points.

    ocvt data build --spec world.cfg --mode compositional --out data/
    ocvt train --config train.cfg --data data/ --out run/
    ocvt eval --checkpoint run/checkpoint.pt --data data/ --split val
    ocvt ablate --grid grid.cfg --data data/ --out ablation/
    ocvt probe --checkpoint f.pt --data data/ --task contact --source ol
    ocvt fewshot --checkpoint f.pt --data data/ --shots 5
    ocvt viz --checkpoint f.pt --data data/ --sample 3 --out viz/

Config files are plain-text `key = value` lines (see configfile.py).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .configfile import _parse_value, parse_kv_file, split_known_keys
from .errors import ConfigurationError, SplitError
from .model import ModelConfig
from .training import TrainConfig, evaluate, format_ablation_table, model_from_checkpoint, \
    run_ablation, train
from .transfer import ProbeSpec, export_attention, fewshot_finetune, run_probe
from .worlds import (
    SampleSet,
    SplitSpec,
    WorldSpec,
    build_fewshot_base,
    build_split,
    export_dataset,
    load_dataset,
)

SOURCE_ALIASES = {
    "ol": "summaries_mean",
    "backbone": "backbone_cls_concat",
    "ol_id": "summaries_plus_onehot_id",
}
TASK_ALIASES = {"contact": "contact_state", "predicate": "predicate"}


def _world_and_split(values: dict):
    world_keys = {"num_frames", "height", "width", "num_objects", "seed"}
    world = WorldSpec(**{k: values[k] for k in world_keys if k in values})
    split = SplitSpec(
        mode=values.get("mode", "standard"),
        train_nouns=tuple(values.get("train_nouns", ())),
        test_nouns=tuple(values.get("test_nouns", ())),
        base_verbs=tuple(values.get("base_verbs", ())),
        novel_verbs=tuple(values.get("novel_verbs", ())),
        shots_per_class=values.get("shots_per_class", 5),
    )
    return world, split


def cmd_data_build(args) -> int:
    values = parse_kv_file(args.spec)
    if args.mode:
        values["mode"] = args.mode
    world, split = _world_and_split(values)
    n_train = args.n_train or values.get("n_train", 1000)
    n_val = args.n_val or values.get("n_val", 200)
    splits = {}
    if split.mode == "fewshot":
        base_train, base_val = build_fewshot_base(
            world, split, values.get("base_n_train", n_train), values.get("base_n_val", n_val))
        novel_train, novel_val = build_split(world, split, n_train, n_val)
        splits = {"base_train": base_train, "base_val": base_val,
                  "novel_train": novel_train, "novel_val": novel_val}
    else:
        train_recs, val_recs = build_split(world, split, n_train, n_val)
        splits = {"train": train_recs, "val": val_recs}
    rows = export_dataset(splits, args.out, world, split)
    counts = {name: sum(1 for r in rows if r["split"] == name) for name in splits}
    print(f"wrote {len(rows)} samples to {args.out}: " +
          ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _load_sets(data_dir, *names):
    world, sets, meta = load_dataset(data_dir)
    missing = [n for n in names if n not in sets]
    if missing:
        raise ConfigurationError(
            f"dataset {data_dir} lacks splits {missing}; has {sorted(sets)}")
    return world, sets, meta


def _configs_from_file(path, world: WorldSpec):
    values = parse_kv_file(path) if path else {}
    train_values, model_values, leftover = split_known_keys(values, TrainConfig, ModelConfig)
    if leftover:
        raise ConfigurationError(f"unknown config keys: {sorted(leftover)}")
    train_config = TrainConfig(**train_values)
    defaults = {
        "num_classes": len(world.verb_catalog),
        "num_frames": world.num_frames,
        "height": world.height,
        "width": world.width,
        "num_objects": world.num_objects,
    }
    defaults.update(model_values)
    model_config = ModelConfig(**defaults)
    if "with_aux_encoder" not in model_values:
        model_config.with_aux_encoder = train_config.aux
    if "with_affinity_encoder" not in model_values:
        model_config.with_affinity_encoder = train_config.aff
    return train_config, model_config


def cmd_train(args) -> int:
    world, sets, _ = _load_sets(args.data, args.train_split, args.val_split)
    train_config, model_config = _configs_from_file(args.config, world)
    if args.stage:
        train_config.stage = args.stage
    model = None
    if args.init_checkpoint:
        model, _ = model_from_checkpoint(args.init_checkpoint)
    result = train(train_config, model_config, sets[args.train_split], sets[args.val_split],
                   out_dir=args.out, model=model, world=world)
    print(json.dumps({"checkpoint": result.checkpoint_path, "final_val": result.final_val}))
    return 0


def cmd_eval(args) -> int:
    world, sets, _ = _load_sets(args.data, args.split)
    model, payload = model_from_checkpoint(args.checkpoint)
    if payload["num_classes"] != len(world.verb_catalog):
        raise ConfigurationError(
            f"checkpoint has {payload['num_classes']} classes, dataset "
            f"{len(world.verb_catalog)}")
    report = evaluate(model, sets[args.split], dump_path=args.dump)
    print(json.dumps({"split": args.split, **report}))
    return 0


def _parse_grid(path):
    base_values: dict = {}
    deltas: list = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("cell:"):
            cell: dict = {}
            body = line[len("cell:"):].strip()
            if body:
                for item in body.split(";"):
                    key, value = item.split("=", 1)
                    cell[key.strip()] = _parse_value(value)
            deltas.append(cell)
        else:
            key, value = line.split("=", 1)
            base_values[key.strip()] = _parse_value(value)
    return base_values, deltas


def cmd_ablate(args) -> int:
    world, sets, _ = _load_sets(args.data, args.train_split, args.val_split)
    base_values, deltas = _parse_grid(args.grid)
    if not deltas:
        raise ConfigurationError(f"grid file {args.grid} defines no cells")
    seeds = base_values.pop("seeds", (0,))
    if isinstance(seeds, int):
        seeds = (seeds,)
    stage1_epochs = base_values.pop("stage1_epochs", None)
    train_values, model_values, leftover = split_known_keys(base_values, TrainConfig, ModelConfig)
    if leftover:
        raise ConfigurationError(f"unknown grid keys: {sorted(leftover)}")
    train_config = TrainConfig(**train_values)
    model_config = ModelConfig(num_classes=len(world.verb_catalog), num_frames=world.num_frames,
                               height=world.height, width=world.width,
                               num_objects=world.num_objects, **model_values)
    rows = run_ablation(model_config, train_config, deltas, seeds,
                        sets[args.train_split], sets[args.val_split], world=world,
                        stage1_epochs=stage1_epochs)
    table = format_ablation_table(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.jsonl", "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
        (out / "ablation.txt").write_text(table + "\n")
    return 0


def cmd_probe(args) -> int:
    world, sets, _ = _load_sets(args.data, args.train_split, args.val_split)
    model, _ = model_from_checkpoint(args.checkpoint)
    spec = ProbeSpec(task=TASK_ALIASES[args.task], feature_source=SOURCE_ALIASES[args.source],
                     epochs=args.epochs, seed=args.seed)
    result = run_probe(model, sets[args.train_split], sets[args.val_split], spec,
                       cache_dir=args.cache_dir)
    row = {
        "task": result.task,
        "source": result.feature_source,
        "per_video_top1": result.per_video_top1,
        "per_class_top1": result.per_class_top1,
        "recall_at": {str(k): v for k, v in result.recall_at.items()},
        "majority_baseline": result.majority_baseline,
        "beats_majority": result.beats_majority,
        "n_val": result.n_val,
    }
    print(json.dumps(row))
    if args.out:
        with open(args.out, "a") as f:
            f.write(json.dumps(row) + "\n")
    return 0


def cmd_fewshot(args) -> int:
    world, sets, meta = _load_sets(args.data, "novel_train", "novel_val")
    split = SplitSpec.from_dict(meta["split_spec"])
    model, _ = model_from_checkpoint(args.checkpoint)
    novel_train = sets["novel_train"]
    shots = args.shots
    per_class = split.shots_per_class
    if shots > per_class:
        raise SplitError(f"dataset was built with {per_class} shots per class, asked for {shots}")
    if shots < per_class:
        keep = []
        counts: dict = {}
        for i in range(len(novel_train)):
            label = int(novel_train.verb_labels[i])
            if counts.get(label, 0) < shots:
                counts[label] = counts.get(label, 0) + 1
                keep.append(i)
        novel_train = SampleSet.from_records([novel_train.record(i) for i in keep])
    kinds = ("fused", "visual_only") if args.kind == "both" else (args.kind,)
    out_rows = []
    for kind in kinds:
        report, _ = fewshot_finetune(model, novel_train, sets["novel_val"], split.novel_verbs,
                                     kind=kind)
        out_rows.append(report)
        print(json.dumps(report))
    if args.out:
        with open(args.out, "a") as f:
            for row in out_rows:
                f.write(json.dumps(row) + "\n")
    return 0


def cmd_viz(args) -> int:
    world, sets, _ = _load_sets(args.data, args.split)
    model, _ = model_from_checkpoint(args.checkpoint)
    written = export_attention(model, sets[args.split], [args.sample], args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocvt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset tools")
    data_sub = data.add_subparsers(dest="data_command", required=True)
    build = data_sub.add_parser("build", help="generate and export a synthetic dataset")
    build.add_argument("--spec", required=True, help="world/split key=value config file")
    build.add_argument("--mode", choices=["standard", "compositional", "fewshot"])
    build.add_argument("--out", required=True)
    build.add_argument("--n-train", type=int, default=None)
    build.add_argument("--n-val", type=int, default=None)
    build.set_defaults(func=cmd_data_build)

    tr = sub.add_parser("train", help="train one stage")
    tr.add_argument("--config", default=None, help="train/model key=value config file")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--stage", choices=["backbones", "fusion", "end_to_end"], default=None)
    tr.add_argument("--init-checkpoint", default=None)
    tr.add_argument("--train-split", default="train")
    tr.add_argument("--val-split", default="val")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="val")
    ev.add_argument("--dump", default=None, help="write per-sample probabilities (JSONL)")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="run a config-delta grid")
    ab.add_argument("--grid", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", default=None)
    ab.add_argument("--train-split", default="train")
    ab.add_argument("--val-split", default="val")
    ab.set_defaults(func=cmd_ablate)

    pr = sub.add_parser("probe", help="linear probe on frozen features")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--task", choices=sorted(TASK_ALIASES), required=True)
    pr.add_argument("--source", choices=sorted(SOURCE_ALIASES), required=True)
    pr.add_argument("--train-split", default="train")
    pr.add_argument("--val-split", default="val")
    pr.add_argument("--epochs", type=int, default=300)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--cache-dir", default=None)
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_probe)

    fs = sub.add_parser("fewshot", help="few-shot classifier finetuning")
    fs.add_argument("--checkpoint", required=True)
    fs.add_argument("--data", required=True)
    fs.add_argument("--shots", type=int, choices=[5, 10], default=5)
    fs.add_argument("--kind", choices=["fused", "visual_only", "both"], default="both")
    fs.add_argument("--out", default=None)
    fs.set_defaults(func=cmd_fewshot)

    vz = sub.add_parser("viz", help="export object-learner attention maps")
    vz.add_argument("--checkpoint", required=True)
    vz.add_argument("--data", required=True)
    vz.add_argument("--split", default="val")
    vz.add_argument("--sample", type=int, required=True)
    vz.add_argument("--out", required=True)
    vz.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, SplitError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
