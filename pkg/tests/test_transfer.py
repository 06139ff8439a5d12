import numpy as np
import pytest
import torch

from ocvt.errors import ProbeSpecError, SplitError
from ocvt.model import ModelConfig, ObjectCentricVideoModel, params_hash
from ocvt.training import TrainConfig
from ocvt.transfer import (
    FeatureTable,
    ProbeSpec,
    attention_mass_stats,
    export_attention,
    extract_frozen_features,
    fewshot_finetune,
    linear_probe,
    per_class_accuracy,
    probe_inputs,
    read_attention_csv,
    run_probe,
    shuffle_discrimination_rate,
)
from ocvt.worlds import SampleSet, SplitSpec, WorldSpec, build_split, generate_sample

TINY_MODEL = dict(num_classes=8, num_frames=4, height=16, width=16, num_objects=3,
                  visual_dim=16, visual_depth=1, visual_heads=2, patch_size=8, tap_layer=1,
                  traj_dim=16, spatial_layers=1, temporal_layers=1, traj_heads=2,
                  ol_dim=16, ol_layers=1, ol_heads=2, context_queries=1,
                  cls_layers=1, cls_heads=2, max_frames=8, dropconnect=0.0)


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return ObjectCentricVideoModel(ModelConfig(**TINY_MODEL))


def test_feature_dims(tiny_model, tiny_set):
    mean_table = extract_frozen_features(tiny_model, tiny_set, "summaries_mean")
    assert mean_table.features.shape == (len(tiny_set), 16)
    concat_table = extract_frozen_features(tiny_model, tiny_set, "backbone_cls_concat")
    assert concat_table.features.shape == (len(tiny_set), 32)
    id_table = extract_frozen_features(tiny_model, tiny_set, "summaries_plus_onehot_id")
    assert id_table.features.shape == (len(tiny_set), 3, 16 + 3)
    assert id_table.per_object


def test_summaries_mean_is_arithmetic_mean(tiny_model, tiny_set):
    from ocvt.training import make_batch
    mean_table = extract_frozen_features(tiny_model, tiny_set, "summaries_mean")
    batch = make_batch(tiny_set, np.arange(4))
    tiny_model.eval()
    with torch.no_grad():
        out = tiny_model(batch["clip"], batch["boxes"], batch["presence"])
    manual = out.summaries[:, :3].mean(dim=1).numpy()
    assert np.allclose(mean_table.features[:4], manual, atol=1e-5)


def test_task_arity_guard(tiny_set):
    with pytest.raises(ProbeSpecError, match="incompatible"):
        ProbeSpec(task="contact_state", feature_source="summaries_plus_onehot_id").validate()
    table = FeatureTable(source="summaries_plus_onehot_id",
                         features=np.zeros((4, 3, 8), dtype=np.float32), per_object=True)
    with pytest.raises(ProbeSpecError, match="per-video"):
        probe_inputs(table, tiny_set, "contact_state")


def test_predicate_inputs_append_onehot_ids(tiny_set):
    table = FeatureTable(source="summaries_mean",
                         features=np.ones((len(tiny_set), 4), dtype=np.float32),
                         per_object=False)
    X, y = probe_inputs(table, tiny_set, "predicate")
    valid = (tiny_set.relation_labels >= 0).sum()
    assert X.shape == (valid, 4 + 3)
    assert set(np.unique(X[:, 4:])) <= {0.0, 1.0}
    assert (X[:, 4:].sum(axis=1) == 1).all()


def test_probe_on_separable_features():
    rng = np.random.default_rng(0)
    n = 120
    labels = rng.integers(0, 3, n)
    feats = np.zeros((n, 3), dtype=np.float32)
    feats[np.arange(n), labels] = 4.0  # perfectly separable
    feats += rng.normal(0, 0.05, feats.shape).astype(np.float32)

    class FakeSet:
        contact_labels = labels.astype(np.int64)

    table = FeatureTable(source="summaries_mean", features=feats, per_object=False)
    spec = ProbeSpec(task="contact_state", epochs=200, lr=0.1)
    result = linear_probe(table, table, FakeSet(), FakeSet(), spec)
    assert result.per_video_top1 == 1.0
    assert result.beats_majority


def test_per_class_accuracy_matches_confusion_matrix():
    labels = np.array([0, 0, 0, 1, 1, 2])
    pred = np.array([0, 0, 1, 1, 1, 0])
    # recalls: class0 2/3, class1 2/2, class2 0/1 -> macro 0.5555
    macro = per_class_accuracy(pred, labels, 3)
    confusion = np.zeros((3, 3))
    for p, l in zip(pred, labels):
        confusion[l, p] += 1
    manual = np.mean([confusion[c, c] / confusion[c].sum() for c in range(3)])
    assert macro == pytest.approx(manual)
    assert macro == pytest.approx((2 / 3 + 1.0 + 0.0) / 3)


def test_probe_reports_majority_baseline():
    rng = np.random.default_rng(1)
    n = 90
    labels = np.array([0] * 60 + [1] * 20 + [2] * 10)
    feats = rng.normal(0, 1, (n, 4)).astype(np.float32)  # uninformative

    class FakeSet:
        contact_labels = labels.astype(np.int64)

    table = FeatureTable(source="summaries_mean", features=feats, per_object=False)
    result = linear_probe(table, table, FakeSet(), FakeSet(),
                          ProbeSpec(task="contact_state", epochs=5, lr=0.01))
    assert result.majority_baseline == pytest.approx(60 / 90)


def test_probe_never_mutates_model(tiny_model, tiny_set):
    before = params_hash(tiny_model)
    run_probe(tiny_model, tiny_set, tiny_set, ProbeSpec(task="contact_state", epochs=20))
    assert params_hash(tiny_model) == before


def test_feature_cache_content_addressed(tiny_model, tiny_set, tmp_path):
    extract_frozen_features(tiny_model, tiny_set, "summaries_mean", cache_dir=tmp_path)
    files_before = sorted(p.name for p in tmp_path.iterdir())
    extract_frozen_features(tiny_model, tiny_set, "summaries_mean", cache_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == files_before  # reused
    with torch.no_grad():
        tiny_model.f1.fc1.weight += 0.1  # a different checkpoint
    extract_frozen_features(tiny_model, tiny_set, "summaries_mean", cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == len(files_before) + 1


def test_predicate_probe_reports_recall_at_k(tiny_model, tiny_set):
    result = run_probe(tiny_model, tiny_set, tiny_set,
                       ProbeSpec(task="predicate", feature_source="summaries_plus_onehot_id",
                                 epochs=30))
    assert set(result.recall_at) == {1, 2}
    assert 0.0 <= result.recall_at[1] <= result.recall_at[2] <= 1.0


# ---------------------------------------------------------------------------
# few-shot protocol


@pytest.fixture(scope="module")
def fewshot_sets():
    world = WorldSpec(num_frames=4, height=16, width=16, num_objects=3, seed=21)
    split = SplitSpec(mode="fewshot", base_verbs=(0, 1, 2, 3), novel_verbs=(4, 5, 6, 7),
                      shots_per_class=5)
    novel_train, novel_val = build_split(world, split, 0, 64)
    return SampleSet.from_records(novel_train), SampleSet.from_records(novel_val), split


def test_fewshot_touches_only_classifiers(tiny_model, fewshot_sets):
    novel_train, novel_val, split = fewshot_sets
    config = TrainConfig(epochs=2, base_lr=1e-2, batch_size=16, augment=False)
    report, tuned = fewshot_finetune(tiny_model, novel_train, novel_val, split.novel_verbs,
                                     config, kind="fused")
    assert report["n_novel_classes"] == 4
    for name in ("visual", "trajectory", "object_learner", "cls_module", "head_visual"):
        assert params_hash(getattr(tuned, name)) == params_hash(getattr(tiny_model, name)), name
    assert params_hash(tuned.f1) != params_hash(tiny_model.f1)
    assert params_hash(tuned.f2) != params_hash(tiny_model.f2)


def test_fewshot_zero_epochs_is_chance(tiny_model, fewshot_sets):
    novel_train, novel_val, split = fewshot_sets
    config = TrainConfig(epochs=0, batch_size=16, augment=False)
    report, _ = fewshot_finetune(tiny_model, novel_train, novel_val, split.novel_verbs,
                                 config, kind="fused")
    assert abs(report["top1"] - 0.25) < 0.22  # 4 classes, 64 samples: wide chance band


def test_fewshot_rejects_label_leak(tiny_model, fewshot_sets):
    novel_train, novel_val, split = fewshot_sets
    with pytest.raises(SplitError, match="novel"):
        fewshot_finetune(tiny_model, novel_train, novel_val, novel_verbs=(5, 6),
                         config=TrainConfig(epochs=0), kind="fused")


def test_fewshot_visual_only_kind(tiny_model, fewshot_sets):
    novel_train, novel_val, split = fewshot_sets
    config = TrainConfig(epochs=1, base_lr=1e-2, batch_size=16, augment=False)
    report, tuned = fewshot_finetune(tiny_model, novel_train, novel_val, split.novel_verbs,
                                     config, kind="visual_only")
    assert report["kind"] == "visual_only"
    assert params_hash(tuned.f1) == params_hash(tiny_model.f1)
    assert params_hash(tuned.head_visual) != params_hash(tiny_model.head_visual)


# ---------------------------------------------------------------------------
# attention export


def test_export_attention_files_and_partition(tiny_model, tiny_set, tmp_path):
    files = export_attention(tiny_model, tiny_set, [0], tmp_path)
    csvs = [f for f in files if f.endswith(".csv")]
    pngs = [f for f in files if f.endswith(".png")]
    assert csvs and pngs
    assert any("L0_h0_q0" in f for f in csvs)
    weights = read_attention_csv(csvs[0])
    n_visual = 4  # 16x16 frames, patch 8 -> 2x2 grid
    assert abs(weights.sum() - 1.0) < 1e-4  # joint (t, s) softmax: unit total mass
    per_frame_total = weights.sum(axis=1)
    visual_mass = weights[:, :n_visual].sum(axis=1)
    # per frame, the heatmap carries the visual share; the rest sits on trajectory slots
    assert np.all(visual_mass <= per_frame_total + 1e-7)
    assert np.all(per_frame_total <= 1.0 + 1e-6)


def test_attention_csv_round_trip_bit_exact(tiny_model, tiny_set, tmp_path):
    from ocvt.training import make_batch
    from ocvt.transfer import _ol_stage1_records
    files = export_attention(tiny_model, tiny_set, [1], tmp_path)
    csv_path = next(f for f in files if f.endswith("L0_h0_q0.csv"))
    reloaded = read_attention_csv(csv_path)
    records = _ol_stage1_records(tiny_model, make_batch(tiny_set, np.array([1])))
    in_memory = records[0][0, 0, 0].numpy().astype(np.float32)
    assert np.array_equal(reloaded, in_memory)  # %.9g decimal round-trips float32


def test_attention_mass_stats_structure(tiny_model, tiny_set):
    stats = attention_mass_stats(tiny_model, tiny_set, [0, 1])
    assert stats
    for row in stats:
        assert 0.0 <= row["mass_in_box"] <= 1.0 + 1e-6
        assert 0.0 <= row["area_fraction"] <= 1.0
        assert isinstance(row["moving"], bool)


def test_shuffle_discrimination_bounds(tiny_model, tiny_set):
    out = shuffle_discrimination_rate(tiny_model, tiny_set, seed=0)
    assert 0.0 <= out["rate"] <= 1.0
    assert out["n_objects"] > 0
