import json

import pytest

from ocvt.cli import main
from ocvt.worlds import load_dataset, load_manifest

WORLD_CFG = """
num_frames = 4
height = 16
width = 16
num_objects = 3
seed = 31
mode = standard
n_train = 24
n_val = 16
"""

TRAIN_CFG = """
epochs = 1
base_lr = 1e-3
batch_size = 8
stage = backbones
dropconnect = 0.0
lr_decay_points =
augment = true
# tiny model
visual_dim = 16
visual_depth = 1
visual_heads = 2
patch_size = 8
tap_layer = 1
traj_dim = 16
spatial_layers = 1
temporal_layers = 1
traj_heads = 2
ol_dim = 16
ol_layers = 1
ol_heads = 2
context_queries = 1
cls_layers = 1
cls_heads = 2
max_frames = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "world.cfg").write_text(WORLD_CFG)
    (root / "train.cfg").write_text(TRAIN_CFG)
    assert main(["data", "build", "--spec", str(root / "world.cfg"),
                 "--out", str(root / "data")]) == 0
    return root


def test_data_build_wrote_dataset(workspace):
    rows = load_manifest(workspace / "data")
    assert len(rows) == 40
    spec, sets, meta = load_dataset(workspace / "data")
    assert set(sets) == {"train", "val"}
    assert len(sets["train"]) == 24 and len(sets["val"]) == 16


def test_data_build_fewshot_splits(workspace):
    cfg = workspace / "fewshot.cfg"
    cfg.write_text(WORLD_CFG + """
base_verbs = 0,1,2,3
novel_verbs = 4,5,6,7
shots_per_class = 5
base_n_train = 16
base_n_val = 8
n_val = 12
""")
    assert main(["data", "build", "--spec", str(cfg), "--mode", "fewshot",
                 "--out", str(workspace / "fsdata")]) == 0
    _, sets, meta = load_dataset(workspace / "fsdata")
    assert set(sets) == {"base_train", "base_val", "novel_train", "novel_val"}
    assert len(sets["novel_train"]) == 20  # 5 shots x 4 novel verbs


def test_train_eval_cycle(workspace, capsys):
    rc = main(["train", "--config", str(workspace / "train.cfg"),
               "--data", str(workspace / "data"), "--out", str(workspace / "run1")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["checkpoint"].endswith("checkpoint.pt")
    assert (workspace / "run1" / "metrics.jsonl").exists()
    assert (workspace / "run1" / "losses.jsonl").exists()

    rc = main(["train", "--config", str(workspace / "train.cfg"),
               "--data", str(workspace / "data"), "--out", str(workspace / "run2"),
               "--stage", "fusion", "--init-checkpoint",
               str(workspace / "run1" / "checkpoint.pt")])
    assert rc == 0
    capsys.readouterr()

    rc = main(["eval", "--checkpoint", str(workspace / "run2" / "checkpoint.pt"),
               "--data", str(workspace / "data"), "--split", "val",
               "--dump", str(workspace / "probs.jsonl")])
    assert rc == 0
    report = json.loads(capsys.readouterr().out.strip())
    assert 0.0 <= report["top1"] <= 1.0
    assert report["top5"] >= report["top1"]
    assert len((workspace / "probs.jsonl").read_text().splitlines()) == 16


def test_probe_command(workspace, capsys):
    rc = main(["probe", "--checkpoint", str(workspace / "run2" / "checkpoint.pt"),
               "--data", str(workspace / "data"), "--task", "contact", "--source", "ol",
               "--epochs", "10", "--out", str(workspace / "probe.jsonl")])
    assert rc == 0
    row = json.loads(capsys.readouterr().out.strip())
    assert row["task"] == "contact_state"
    assert 0.0 <= row["per_video_top1"] <= 1.0
    assert (workspace / "probe.jsonl").exists()


def test_predicate_probe_command(workspace, capsys):
    rc = main(["probe", "--checkpoint", str(workspace / "run2" / "checkpoint.pt"),
               "--data", str(workspace / "data"), "--task", "predicate", "--source", "ol_id",
               "--epochs", "10"])
    assert rc == 0
    row = json.loads(capsys.readouterr().out.strip())
    assert "1" in row["recall_at"] and "2" in row["recall_at"]


def test_viz_command(workspace, capsys):
    rc = main(["viz", "--checkpoint", str(workspace / "run2" / "checkpoint.pt"),
               "--data", str(workspace / "data"), "--split", "val", "--sample", "0",
               "--out", str(workspace / "viz")])
    assert rc == 0
    files = list((workspace / "viz").iterdir())
    assert any(f.suffix == ".png" for f in files)
    assert any(f.suffix == ".csv" for f in files)


def test_fewshot_command(workspace, capsys):
    # pretrain on the fewshot dataset's base split, then classifier-only transfer
    rc = main(["train", "--config", str(workspace / "train.cfg"),
               "--data", str(workspace / "fsdata"), "--out", str(workspace / "fsrun"),
               "--train-split", "base_train", "--val-split", "base_val"])
    assert rc == 0
    capsys.readouterr()
    rc = main(["fewshot", "--checkpoint", str(workspace / "fsrun" / "checkpoint.pt"),
               "--data", str(workspace / "fsdata"), "--shots", "5", "--kind", "both"])
    assert rc == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    kinds = {row["kind"] for row in lines}
    assert kinds == {"fused", "visual_only"}
    for row in lines:
        assert row["n_shots"] == 20


def test_ablate_command(workspace, capsys):
    grid = workspace / "grid.cfg"
    grid.write_text("""
seeds = 0
epochs = 1
base_lr = 1e-3
batch_size = 8
dropconnect = 0.0
stage1_epochs = 1
visual_dim = 16
visual_depth = 1
visual_heads = 2
patch_size = 8
tap_layer = 1
traj_dim = 16
spatial_layers = 1
temporal_layers = 1
traj_heads = 2
ol_dim = 16
ol_layers = 1
ol_heads = 2
context_queries = 1
cls_layers = 1
cls_heads = 2
max_frames = 8
cell: aux = true; aux_weight = 0.01
cell: aux = false
""")
    rc = main(["ablate", "--grid", str(grid), "--data", str(workspace / "data"),
               "--out", str(workspace / "ablation")])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "OL only" in printed
    rows = [json.loads(l) for l in
            (workspace / "ablation" / "ablation.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    assert all(r["error"] is None for r in rows)


def test_eval_class_count_mismatch(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(WORLD_CFG.replace("seed = 31", "seed = 77") + "\nverb_subset = 0\n")
    # dataset with a different verb catalog size cannot be produced by the CLI,
    # so exercise the guard directly with a truncated-catalog dataset
    from ocvt.worlds import WorldSpec, SplitSpec, build_split, export_dataset
    world = WorldSpec(num_frames=4, height=16, width=16, seed=3,
                      verb_catalog=("hold_still", "circle", "swap", "shrink_grow"))
    train, val = build_split(world, SplitSpec(), 8, 8)
    export_dataset({"train": train, "val": val}, tmp_path / "ds4", world)
    rc = main(["eval", "--checkpoint", str(workspace / "run2" / "checkpoint.pt"),
               "--data", str(tmp_path / "ds4"), "--split", "val"])
    assert rc == 2
    assert "classes" in capsys.readouterr().err


def test_unknown_config_key_fails(workspace, capsys):
    bad = workspace / "badtrain.cfg"
    bad.write_text("epochs = 1\nmystery_knob = 5\n")
    rc = main(["train", "--config", str(bad), "--data", str(workspace / "data"),
               "--out", str(workspace / "never")])
    assert rc == 2
    assert "unknown" in capsys.readouterr().err
