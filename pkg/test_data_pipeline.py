# test_data_pipeline.py
"""
Data pipeline tests - clip documents, manifests, replay padding, bones,
seeded batching and the synthetic fencing generator.
Run with pytest, or directly: python test_data_pipeline.py
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

# Add project root to path
project_root = Path(__file__).parent
sys.path.append(str(project_root))

from core.data_pipeline import (ClipRecord, DatasetManifest, SkeletonClip, SkeletonDataset, batch_iter, load_clip,
                                load_manifest, replay_pad, to_bone, write_clip)
from core.errors import ConfigError, ShapeError
from core.skeleton_graph import Topology, build_graph
from core.synthetic_fencing import FENCING_CLASSES, FencingSynthesizer, SynthConfig, synth_dataset

SMALL_SYNTH = SynthConfig(seed=3, num_classes=3, train_clips_per_class=4, val_clips_per_class=2,
                          min_frames=20, max_frames=40, target_t=40, train_subjects=2, val_subjects=1)


def random_clip(rng, num_frames: int = 5, num_joints: int = 3, label: int = 0, subject: str = "s00") -> SkeletonClip:
    values = rng.standard_normal((3, num_frames, num_joints))
    values[2] = rng.uniform(0.0, 1.0, (num_frames, num_joints))
    return SkeletonClip(values, label, subject)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def test_replay_pad_examples():
    frames = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
    assert_array_equal(replay_pad(frames, 7).ravel(), [1, 2, 3, 1, 2, 3, 1])
    assert_array_equal(replay_pad(frames, 3), frames)
    assert_array_equal(replay_pad(frames, 2).ravel(), [1, 2])
    with pytest.raises(ConfigError):
        replay_pad(frames, 0)


def test_replay_pad_is_periodic():
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((3, 7, 4))
    padded = replay_pad(raw, 152)
    for k in range(152 // 7):
        assert_array_equal(padded[:, 7 * k:7 * (k + 1)], raw)


def test_bone_examples():
    graph = build_graph(Topology.CHAIN, num_joints=3)
    values = np.zeros((3, 1, 3))
    values[0, 0] = [0.0, 1.0, 3.0]
    values[2, 0] = [0.9, 0.4, 0.7]
    bones = to_bone(values, graph)
    assert_array_equal(bones[0, 0], [0.0, 1.0, 2.0])
    assert_array_equal(bones[1, 0], [0.0, 0.0, 0.0])
    assert_array_equal(bones[2, 0], [0.9, 0.4, 0.4])

    same_point = np.ones((3, 4, 3))
    assert_array_equal(to_bone(same_point, graph)[:2], np.zeros((2, 4, 3)))
    with pytest.raises(ShapeError):
        to_bone(np.ones((3, 4, 5)), graph)


def test_bones_are_translation_invariant():
    graph = build_graph(Topology.BODY18)
    rng = np.random.default_rng(1)
    values = rng.standard_normal((3, 6, 18))
    shifted = values.copy()
    shifted[0] += 2.5
    shifted[1] -= 0.75
    bones, shifted_bones = to_bone(values, graph), to_bone(shifted, graph)
    assert_allclose(shifted_bones, bones, rtol=0, atol=1e-12)
    assert_array_equal(bones[:2, :, graph.center], np.zeros((2, 6)))


# ---------------------------------------------------------------------------
# Clip documents
# ---------------------------------------------------------------------------

def test_clip_write_then_load_is_exact():
    clip = random_clip(np.random.default_rng(2), num_frames=9, num_joints=4, label=2, subject="s07")
    with tempfile.TemporaryDirectory() as tmp:
        loaded = load_clip(write_clip(clip, Path(tmp) / "nested" / "clip.json"))
        first = (Path(tmp) / "nested" / "clip.json").read_bytes()
        assert write_clip(loaded, Path(tmp) / "again.json").read_bytes() == first
    assert_array_equal(loaded.values, clip.values)
    assert (loaded.label, loaded.subject, loaded.fps) == (2, "s07", 30.0)


def test_clip_parse_errors():
    good = random_clip(np.random.default_rng(3), num_frames=3).to_dict()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "clip.json"

        bad_arity = json.loads(json.dumps(good))
        bad_arity["frames"][1] = bad_arity["frames"][1][:2]
        path.write_text(json.dumps(bad_arity))
        with pytest.raises(ConfigError, match="frame 1 has 2 joints"):
            load_clip(path)

        bad_conf = json.loads(json.dumps(good))
        bad_conf["frames"][2][0][2] = 1.5
        path.write_text(json.dumps(bad_conf))
        with pytest.raises(ConfigError, match="confidence 1.5 outside"):
            load_clip(path)

        missing = {k: v for k, v in good.items() if k != "subject"}
        path.write_text(json.dumps(missing))
        with pytest.raises(ConfigError, match="subject"):
            load_clip(path)

        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_clip(path)

    with pytest.raises(ConfigError, match="cannot read"):
        load_clip(Path("/nonexistent/clip.json"))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def test_manifest_checks_subjects_and_labels():
    clips = [ClipRecord("a.json", 0, "s00", "train"), ClipRecord("b.json", 1, "s00", "val")]
    ok, issues = DatasetManifest(["x", "y"], clips=clips).validate()
    assert not ok and "both train and val" in issues[0]

    ok, issues = DatasetManifest(["x", "y"], clips=[ClipRecord("a.json", 2, "s00", "train")]).validate()
    assert not ok and "label 2" in issues[0]

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "manifest.json"
        path.write_text(json.dumps(DatasetManifest(["x", "y"], clips=clips).to_dict()))
        with pytest.raises(ConfigError, match="subjects"):
            load_manifest(path)


def test_manifest_round_trip_resolves_relative_paths():
    records = [ClipRecord("clips/train/a.json", 0, "s00"), ClipRecord("clips/val/b.json", 1, "s01", "val")]
    with tempfile.TemporaryDirectory() as tmp:
        path = DatasetManifest(["x", "y"], "chain", 16, records).save(Path(tmp) / "manifest.json")
        loaded = load_manifest(path)
        assert loaded.topology == "chain" and loaded.target_t == 16
        assert [r.split for r in loaded.clips] == ["train", "val"]
        assert loaded.resolve(loaded.clips[0]) == Path(tmp) / "clips/train/a.json"
        assert loaded.save(Path(tmp) / "again.json").read_bytes() == path.read_bytes()


# ---------------------------------------------------------------------------
# Datasets and batches
# ---------------------------------------------------------------------------

def test_batches_keep_partial_last_batch():
    rng = np.random.default_rng(4)
    clips = [random_clip(rng, label=i % 2, subject=f"s{i % 3}") for i in range(33)]
    manifest = DatasetManifest(["x", "y"], "chain", 8)
    dataset = SkeletonDataset.from_clips(clips, manifest, "train", 8)
    assert len(dataset) == 33
    assert [len(labels) for _, labels in dataset.batches(16, seed=0, epoch=0)] == [16, 16, 1]
    x, _ = next(dataset.batches(16))
    assert x.shape == (16, 3, 8, 3)


def test_shuffle_depends_only_on_seed_and_epoch():
    rng = np.random.default_rng(5)
    clips = [random_clip(rng, label=i % 2) for i in range(20)]
    dataset = SkeletonDataset.from_clips(clips, DatasetManifest(["x", "y"]), "train", 5)
    assert_array_equal(dataset.order(7, 3), dataset.order(7, 3))
    assert not np.array_equal(dataset.order(7, 3), dataset.order(7, 4))
    assert_array_equal(dataset.order(7, 3, shuffle=False), np.arange(20))
    first = [labels.tolist() for _, labels in dataset.batches(6, seed=1, epoch=2)]
    second = [labels.tolist() for _, labels in dataset.batches(6, seed=1, epoch=2)]
    assert first == second


def test_mixed_joint_counts_raise_shape_error():
    rng = np.random.default_rng(12)
    clips = [random_clip(rng, num_joints=3), random_clip(rng, num_joints=3), random_clip(rng, num_joints=5)]
    with pytest.raises(ShapeError, match="clip 2: 5 joints"):
        SkeletonDataset.from_clips(clips, DatasetManifest(["x", "y"]), "train", 5)

    with tempfile.TemporaryDirectory() as tmp:
        records = []
        for i, clip in enumerate(clips):
            write_clip(clip, Path(tmp) / f"c{i}.json")
            records.append(ClipRecord(f"c{i}.json", 0, "s00", "train"))
        manifest = DatasetManifest(["x", "y"], "chain", 5, records, Path(tmp))
        with pytest.raises(ShapeError, match="c2.json"):
            SkeletonDataset(manifest, "train", 5)


def test_bone_modality_routes_through_bones():
    rng = np.random.default_rng(6)
    clips = [random_clip(rng, num_frames=4, label=i % 2) for i in range(4)]
    graph = build_graph(Topology.CHAIN, num_joints=3)
    dataset = SkeletonDataset.from_clips(clips, DatasetManifest(["x", "y"], "chain"), "train", 6, "bone", graph)
    for i, clip in enumerate(clips):
        assert_array_equal(dataset[i][0], to_bone(replay_pad(clip.values, 6), graph))


def test_disk_dataset_matches_generated_clips():
    with tempfile.TemporaryDirectory() as tmp:
        manifest, clips = synth_dataset(SMALL_SYNTH, tmp)
        manifest = load_manifest(Path(tmp) / "manifest.json")
        serial = SkeletonDataset(manifest, "val", 40, workers=1)
        threaded = SkeletonDataset(manifest, "val", 40, workers=4)
        assert len(serial) == 3 * 2
        assert_array_equal(serial.values, threaded.values)
        val_clips = [c for c, r in zip(clips, manifest.clips) if r.split == "val"]
        for i, clip in enumerate(val_clips):
            assert_array_equal(serial[i][0], replay_pad(clip.values, 40))

        sizes = [len(labels) for _, labels in batch_iter(manifest, "train", batch_size=5, target_t=40)]
        assert sizes == [5, 5, 2]

        record = manifest.records("train")[0]
        doc = json.loads(manifest.resolve(record).read_text())
        doc["label"] = (doc["label"] + 1) % 3
        manifest.resolve(record).write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="disagrees"):
            SkeletonDataset(manifest, "train", 40)


def test_empty_split_is_rejected():
    manifest, _ = synth_dataset(SynthConfig(seed=0, num_classes=2, train_clips_per_class=2, val_clips_per_class=0,
                                            min_frames=10, max_frames=12, target_t=12))
    with tempfile.TemporaryDirectory() as tmp:
        manifest.root = Path(tmp)
        dataset = SkeletonDataset(manifest, "val", 12)
        assert len(dataset) == 0
        with pytest.raises(ConfigError, match="no clips"):
            next(dataset.batches(4))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_dataset_is_bitwise_reproducible():
    first_manifest, first = synth_dataset(SMALL_SYNTH)
    second_manifest, second = synth_dataset(SMALL_SYNTH)
    assert first_manifest.to_dict() == second_manifest.to_dict()
    for a, b in zip(first, second):
        assert_array_equal(a.values, b.values)
    _, other = synth_dataset(SynthConfig(**{**SMALL_SYNTH.__dict__, "seed": 4}))
    assert not np.array_equal(first[0].values, other[0].values)


def test_synthetic_layout():
    manifest, clips = synth_dataset()
    assert manifest.classes == list(FENCING_CLASSES)
    assert len(manifest.records("train")) == 70 and len(manifest.records("val")) == 21
    assert not manifest.subjects("train") & manifest.subjects("val")
    assert all(30 <= c.num_frames <= 150 and c.num_joints == 18 for c in clips)
    assert all(c.validate()[0] for c in clips)


def test_noise_free_clips_of_one_subject_differ_only_in_pulse_joints():
    config = SynthConfig(**{**SMALL_SYNTH.__dict__, "noise": 0.0})
    synth = FencingSynthesizer(config)
    pairs = synth.generate()
    # train clips 0 and 2 of class 0 share subject s00 (two train subjects)
    a, b = pairs[0][0], pairs[2][0]
    assert a.subject == b.subject == "s00"
    assert_array_equal(a.values[2], b.values[2])
    moving = set()
    for pulse in synth.class_pulses(0):
        joint = synth.roles[pulse.role]
        moving |= {joint, int(synth.graph.parents[joint])}
    still = [j for j in range(synth.graph.num_joints) if j not in moving]
    assert_array_equal(a.values[:2, :, still], b.values[:2, :, still])
    assert not np.array_equal(a.values, b.values)


def test_classes_share_gross_motion():
    synth = FencingSynthesizer(SynthConfig(seed=5, noise=0.0))
    subject = synth.subjects[0]
    trajectories = [synth.trajectory(label, subject) for label in range(7)]
    reference = trajectories[0].mean(axis=1)
    for label, values in enumerate(trajectories[1:], start=1):
        assert np.max(np.abs(values.mean(axis=1) - reference)) < 1e-6
        assert np.max(np.abs(values - trajectories[0])) > 1e-2, FENCING_CLASSES[label]


def test_synth_config_validation():
    with pytest.raises(ConfigError, match="noise"):
        FencingSynthesizer(SynthConfig(noise=-0.1))
    with pytest.raises(ConfigError, match="frames"):
        FencingSynthesizer(SynthConfig(min_frames=50, max_frames=40))


def run_all() -> bool:
    tests = [obj for name, obj in list(globals().items()) if name.startswith("test_") and callable(obj)]
    passed = 0
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"❌ {test.__name__}: {type(e).__name__}: {e}")
    print(f"\n📊 {passed}/{len(tests)} data pipeline tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    sys.exit(0 if run_all() else 1)
