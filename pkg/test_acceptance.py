# test_acceptance.py
"""
End-to-end acceptance runs on the seeded synthetic fencing dataset.

These train the full ten-block model for 30 epochs per seed and take tens of
minutes on one core, so pytest skips them unless CFSC_RUN_SLOW=1:

    CFSC_RUN_SLOW=1 pytest -m slow test_acceptance.py

Running the file directly always executes them: python test_acceptance.py

The 3-seed memorization check and the byte-identical rerun on the tiny model
are fast and live in test_training.py.
"""

import os
import sys
import tempfile
from pathlib import Path

import pytest

# Add project root to path
project_root = Path(__file__).parent
sys.path.append(str(project_root))

from core.analysis import AblateGrid, run_ablation
from core.config import ModelConfig, OptimConfig
from core.data_pipeline import SkeletonDataset
from core.synthetic_fencing import SynthConfig, synth_dataset
from core.training import CHECKPOINT_NAME, train

SEEDS = (0, 1, 2)

FENCING_CFSC = ModelConfig(topology="body18", num_classes=7, target_t=150, taps=(4, 7, 10), kernel_size=3,
                           lambda_internal=0.3, lambda_fusion=0.3)

slow = pytest.mark.skipif(os.getenv("CFSC_RUN_SLOW") != "1", reason="set CFSC_RUN_SLOW=1 to run")


def optim_for(seed: int) -> OptimConfig:
    return OptimConfig(epochs=30, warmup_epochs=5, seed=seed, micro_batch=4)


def synthetic_split(seed: int):
    manifest, clips = synth_dataset(SynthConfig(seed=seed))
    train_clips = [c for c, r in zip(clips, manifest.clips) if r.split == "train"]
    val_clips = [c for c, r in zip(clips, manifest.clips) if r.split == "val"]
    return (manifest,
            SkeletonDataset.from_clips(train_clips, manifest, "train", 152),
            SkeletonDataset.from_clips(val_clips, manifest, "val", 152))


@pytest.mark.slow
@slow
def test_cascade_model_learns_synthetic_fencing():
    hits = []
    for seed in SEEDS:
        manifest, train_data, val_data = synthetic_split(seed)
        assert (len(train_data), len(val_data)) == (70, 21)
        result = train(FENCING_CFSC, optim_for(seed), manifest, train_data=train_data, val_data=val_data)
        assert result.model.num_frames == 152
        print(f"   seed {seed}: best val top-1 {result.report.best_val_acc:.3f} "
              f"at epoch {result.report.best_epoch + 1}")
        hits.append(result.report.best_val_acc >= 0.9)
    assert sum(hits) >= 2, hits


@pytest.mark.slow
@slow
def test_full_run_is_byte_reproducible():
    with tempfile.TemporaryDirectory() as tmp:
        manifest = synth_dataset(SynthConfig(seed=0), Path(tmp) / "data")[0]
        outputs = []
        for run in ("a", "b"):
            train(FENCING_CFSC, optim_for(0), manifest, Path(tmp) / run)
            outputs.append([(Path(tmp) / run / name).read_bytes()
                            for name in (CHECKPOINT_NAME, "report.json", "report.csv")])
    assert outputs[0] == outputs[1]


@pytest.mark.slow
@slow
def test_baseline_versus_cascade_report():
    grid = AblateGrid.default("cascade", seeds=SEEDS)
    with tempfile.TemporaryDirectory() as tmp:
        manifest = synth_dataset(SynthConfig(seed=0), Path(tmp) / "data")[0]
        result = run_ablation(grid, FENCING_CFSC, optim_for(0), manifest, out_dir=Path(tmp) / "ablate")
        assert (Path(tmp) / "ablate" / "ablation_summary.csv").exists()
    assert len(result.raw) == 2 * len(SEEDS)
    assert set(result.raw["status"]) == {"ok"}
    assert set(result.summary["value"]) == {"off", "on"}
    print(result.summary.to_string(index=False))


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
    print(f"\n📊 {passed}/{len(tests)} acceptance runs passed")
    return passed == len(tests)


if __name__ == "__main__":
    sys.exit(0 if run_all() else 1)
