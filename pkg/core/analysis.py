# core/analysis.py
"""
Ablation grids over the cascade hyperparameters and per-joint feature
response profiles.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .cfsc import REFERENCE_TAP_SETS, TapSet
from .config import ModelConfig, OptimConfig, config_hash
from .data_pipeline import DatasetManifest, SkeletonClip, SkeletonDataset, prepare_clip
from .errors import ConfigError, ShapeError, shape_str
from .model import SkeletonActionModel
from .skeleton_graph import CRITICAL_JOINTS
from .synthetic_fencing import SynthConfig, synth_dataset
from .tensor_autograd import GradCheckResult, Tensor, grad_check, softmax_cross_entropy
from .training import evaluate_model, train


class AblationAxis(Enum):
    LAMBDA = "lambda"
    KERNEL = "kernel"
    TAPS = "taps"
    CASCADE = "cascade"
    LEARN_LAMBDA = "learn_lambda"


DEFAULT_AXIS_VALUES: Dict[AblationAxis, List[Any]] = {
    AblationAxis.LAMBDA: [round(0.1 * k, 1) for k in range(1, 10)],
    AblationAxis.KERNEL: [3, 5, 7, 9, 11],
    AblationAxis.TAPS: [list(t) for t in REFERENCE_TAP_SETS],
    AblationAxis.CASCADE: [False, True],
    AblationAxis.LEARN_LAMBDA: [False, True],
}

RESPONSE_INTERPRETATION = ("response = per-joint L2 energy of the feature over channels and time, "
                           "normalized to sum to 1 per clip (an interpretation of feature response)")


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass
class AblateGrid:
    axis: AblationAxis
    values: List[Any]
    seeds: List[int] = field(default_factory=lambda: [0])

    @classmethod
    def default(cls, axis: Union[AblationAxis, str], seeds: Sequence[int] = (0,)) -> "AblateGrid":
        axis = AblationAxis(axis)
        return cls(axis, list(DEFAULT_AXIS_VALUES[axis]), list(seeds))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblateGrid":
        try:
            axis = AblationAxis(data["axis"])
        except (KeyError, ValueError):
            raise ConfigError(f"grid: 'axis' must be one of {[a.value for a in AblationAxis]}")
        values = data.get("values", DEFAULT_AXIS_VALUES[axis])
        try:
            values, seeds = list(values), [int(s) for s in data.get("seeds", [0])]
        except (TypeError, ValueError):
            raise ConfigError("grid: 'values' and 'seeds' must be lists")
        return cls(axis, values, seeds).require_valid()

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AblateGrid":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read grid {path}: {e}")

    def validate(self) -> Tuple[bool, List[str]]:
        issues = []
        if not self.values:
            issues.append("grid: values must be non-empty")
        if not self.seeds:
            issues.append("grid: seeds must be non-empty")
        for v in self.values:
            if self.axis is AblationAxis.LAMBDA and not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                issues.append(f"grid: λ value {v} outside [0, 1]")
            if self.axis is AblationAxis.KERNEL and not (isinstance(v, int) and v >= 1 and v % 2 == 1):
                issues.append(f"grid: kernel size {v} must be an odd positive integer")
            if self.axis is AblationAxis.TAPS:
                try:
                    blocks = tuple(int(b) for b in v)
                except (TypeError, ValueError):
                    issues.append(f"grid: tap set {v!r} must be a list of block indices")
                    continue
                issues.extend(TapSet(blocks).validate()[1])
            if self.axis in (AblationAxis.CASCADE, AblationAxis.LEARN_LAMBDA) and not isinstance(v, bool):
                issues.append(f"grid: {self.axis.value} values must be true/false, got {v!r}")
        return not issues, issues

    def require_valid(self) -> "AblateGrid":
        ok, issues = self.validate()
        if not ok:
            raise ConfigError("; ".join(issues))
        return self

    def label(self, value: Any) -> str:
        if self.axis is AblationAxis.TAPS:
            return ",".join(str(int(b)) for b in value)
        if isinstance(value, bool):
            return "on" if value else "off"
        return str(value)

    def apply(self, base: ModelConfig, value: Any) -> ModelConfig:
        if self.axis is AblationAxis.LAMBDA:
            return replace(base, lambda_internal=float(value), lambda_fusion=float(value))
        if self.axis is AblationAxis.KERNEL:
            return replace(base, kernel_size=int(value))
        if self.axis is AblationAxis.TAPS:
            return replace(base, taps=tuple(int(b) for b in value))
        if self.axis is AblationAxis.CASCADE:
            return replace(base, taps=(base.taps or (4, 7, 10)) if value else None)
        return replace(base, learn_lambda=bool(value), taps=base.taps or (4, 7, 10))


def _run_point(job: Dict[str, Any]) -> Dict[str, Any]:
    """Train and score one (grid point, seed); failures become rows, never exceptions"""
    row = {"axis": job["axis"], "value": job["label"], "seed": job["seed"]}
    model_cfg, optim_cfg = job["model_cfg"], job["optim_cfg"]
    try:
        row["config_hash"] = config_hash(model_cfg.resolved(), optim_cfg)
        result = train(model_cfg, optim_cfg, job["manifest"], verbose=False)
        row.update(val_top1=result.report.best_val_acc, final_val_top1=result.report.final_val_acc,
                   train_top1=result.report.final_train_acc, status="ok", error="")
    except Exception as e:
        row.update(val_top1=None, final_val_top1=None, train_top1=None, status="failed",
                   error=f"{type(e).__name__}: {e}")
    return row


@dataclass
class AblationResult:
    raw: pd.DataFrame
    summary: pd.DataFrame

    def save(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.raw.to_csv(out_dir / "ablation_raw.csv", index=False)
        self.summary.to_csv(out_dir / "ablation_summary.csv", index=False)
        with open(out_dir / "ablation.json", "w") as f:
            json.dump({"raw": json.loads(self.raw.to_json(orient="records")),
                       "summary": json.loads(self.summary.to_json(orient="records"))}, f, indent=2)
        return out_dir


def summarize_ablation(raw: pd.DataFrame, labels: Sequence[str]) -> pd.DataFrame:
    """One row per grid point: mean and population σ of val top-1 over seeds, best first"""
    rows = []
    for label in labels:
        runs = raw[raw["value"] == label]
        scores = pd.to_numeric(runs["val_top1"], errors="coerce").dropna()
        rows.append({
            "axis": runs["axis"].iloc[0] if len(runs) else "",
            "value": label,
            "mean_val_top1": float(scores.mean()) if len(scores) else np.nan,
            "std_val_top1": float(scores.std(ddof=0)) if len(scores) else np.nan,
            "runs": int(len(scores)),
            "failures": int((runs["status"] != "ok").sum()),
        })
    summary = pd.DataFrame(rows)
    return summary.sort_values("mean_val_top1", ascending=False, kind="stable",
                               na_position="last").reset_index(drop=True)


def run_ablation(grid: AblateGrid, model_cfg: ModelConfig, optim_cfg: OptimConfig, manifest: DatasetManifest,
                 workers: int = 1, out_dir: Optional[Union[str, Path]] = None,
                 verbose: bool = False) -> AblationResult:
    grid.require_valid()
    jobs = []
    for value in grid.values:
        for seed in grid.seeds:
            jobs.append({"axis": grid.axis.value, "label": grid.label(value), "seed": int(seed),
                         "model_cfg": grid.apply(model_cfg, value),
                         "optim_cfg": replace(optim_cfg, seed=int(seed)), "manifest": manifest})

    if verbose:
        print(f"🚀 Ablation over {grid.axis.value}: {len(grid.values)} points × {len(grid.seeds)} seeds "
              f"({workers} worker{'s' if workers > 1 else ''})")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(job) for job in jobs]

    for row in rows:
        if verbose and row["status"] != "ok":
            print(f"❌ {row['axis']}={row['value']} seed {row['seed']}: {row['error']}")

    raw = pd.DataFrame(rows, columns=["axis", "value", "seed", "config_hash", "val_top1", "final_val_top1",
                                      "train_top1", "status", "error"])
    result = AblationResult(raw, summarize_ablation(raw, [grid.label(v) for v in grid.values]))
    if out_dir is not None:
        result.save(out_dir)
        if verbose:
            print(f"💾 Ablation tables saved to {out_dir}")
    return result


# ---------------------------------------------------------------------------
# Joint response
# ---------------------------------------------------------------------------

class ResponseSource(Enum):
    BASELINE = "baseline"
    CFSC = "cfsc"


@dataclass
class ResponseProfile:
    response: np.ndarray  # (N,), nonnegative, sums to 1
    source: ResponseSource
    joint_names: List[str]
    critical: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"joint": np.arange(len(self.response)), "name": self.joint_names,
                             "response": self.response})

    def save_csv(self, path: Union[str, Path], config_hash_value: str = "", seed: Optional[int] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(f"# {RESPONSE_INTERPRETATION}\n")
            f.write(f"# source={self.source.value} config_hash={config_hash_value} seed={seed}\n")
            for name, value in self.critical.items():
                f.write(f"# {name}={value!r}\n")
            self.to_frame().to_csv(f, index=False)
        return path


def response_from_feature(feature: np.ndarray) -> Tuple[np.ndarray, List[str]]:
    """r_j = ‖F[:, :, j]‖₂ / Σ_i ‖F[:, :, i]‖₂; an all-zero feature yields the uniform profile"""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 3:
        raise ShapeError(f"response: expected a C×T×N feature, got {shape_str(feature.shape)}")
    norms = np.sqrt(np.sum(feature * feature, axis=(0, 1)))
    total = norms.sum()
    if total == 0.0:
        n = feature.shape[-1]
        return np.full(n, 1.0 / n), ["feature is all zero; response set to uniform"]
    return norms / total, []


def joint_response(model: Union[SkeletonActionModel, str, Path], clip: Union[SkeletonClip, np.ndarray],
                   source: Union[ResponseSource, str] = ResponseSource.CFSC, verbose: bool = False) -> ResponseProfile:
    source = ResponseSource(source)
    if not isinstance(model, SkeletonActionModel):
        model = SkeletonActionModel.load(model)
    if isinstance(clip, SkeletonClip):
        values = prepare_clip(clip, model.num_frames, model.config.modality, model.graph)
    else:
        values = np.asarray(clip, dtype=np.float64)
    if values.ndim != 3 or values.shape[-1] != model.graph.num_joints:
        raise ShapeError(f"response: clip {shape_str(values.shape)} does not match a "
                         f"{model.graph.num_joints}-joint model")

    out = model(Tensor(values))
    if source is ResponseSource.CFSC:
        if out.cascade is None:
            raise ConfigError("response: source 'cfsc' needs a model trained with a cascade")
        feature = out.cascade.f_dis.data
    else:
        feature = out.blocks.last.data

    response, warnings = response_from_feature(feature)
    names = [model.graph.joint_label(j) for j in range(model.graph.num_joints)]
    critical = {name: float(response[j]) for name, j in CRITICAL_JOINTS.get(model.graph.name, {}).items()}
    if verbose:
        for w in warnings:
            print(f"⚠️  {w}")
    return ResponseProfile(response, source, names, critical, warnings)


# ---------------------------------------------------------------------------
# Model gradient check
# ---------------------------------------------------------------------------

# chain(5), T=16, four blocks 4,4,8,8 with one stride-2 block, taps {2, 4}
TINY_MODEL_CONFIG = ModelConfig(topology="chain", num_joints=5, channels=(4, 4, 8, 8), stride_blocks=(3,),
                                block_kernel=3, taps=(2, 4), kernel_size=3, lambda_internal=0.3,
                                lambda_fusion=0.3, num_classes=3, target_t=16)


def model_gradient_check(config: ModelConfig = TINY_MODEL_CONFIG, seed: int = 0, batch: int = 2,
                         floor: float = 1e-8, verbose: bool = False) -> GradCheckResult:
    """Central-difference check of every model parameter on a seeded random batch"""
    model = SkeletonActionModel(config, seed=seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, model.config.in_channels, model.num_frames, model.graph.num_joints)))
    labels = rng.integers(0, model.config.num_classes, size=batch)

    if verbose:
        print(f"🧮 Gradient check over {model.store.count():,} parameter entries")
    result = grad_check(lambda: softmax_cross_entropy(model(x).logits, labels)[0],
                        dict(model.store.items()), floor=floor)
    if verbose:
        print(f"   max rel err {result.max_rel_error:.3e} at {result.worst or '-'} "
              f"({result.checked} checked, {result.kinks_skipped} kink crossings skipped)")
    return result


# ---------------------------------------------------------------------------
# Memorization run
# ---------------------------------------------------------------------------

# Tiny model with a 32-channel head, so 16 pooled feature vectors are easy to separate
MEMORIZE_MODEL_CONFIG = replace(TINY_MODEL_CONFIG, channels=(8, 8, 16, 32), num_classes=4)

# Full-batch gradient descent: no momentum and a cosine decay to zero keep the loss monotone
MEMORIZE_OPTIM_CONFIG = OptimConfig(lr_max=0.1, lr_min=0.0, momentum=0.0, nesterov=False, weight_decay=0.0,
                                    epochs=200, warmup_epochs=0, batch_size=16)


def memorize_synth_config(seed: int = 0) -> SynthConfig:
    """16 clips on chain(5): four classes, four clips each from two subjects, 16 frames"""
    return SynthConfig(seed=seed, topology="chain", num_joints=5, num_classes=4, train_clips_per_class=4,
                       val_clips_per_class=0, min_frames=16, max_frames=16, target_t=16, train_subjects=2)


def loss_increases(losses: Sequence[float], start: int = 20, tolerance: float = 1e-3) -> List[Tuple[int, float]]:
    """(step, increase) for every step after `start` whose loss rose by more than tolerance"""
    return [(i, later - earlier) for i, (earlier, later) in enumerate(zip(losses[start:], losses[start + 1:]),
                                                                      start=start + 1)
            if later > earlier + tolerance]


@dataclass
class MemorizationResult:
    seed: int
    top1: float
    losses: List[float]
    increases: List[Tuple[int, float]]

    @property
    def passed(self) -> bool:
        return self.top1 == 1.0 and not self.increases


def memorization_run(seed: int = 0, model_cfg: ModelConfig = MEMORIZE_MODEL_CONFIG,
                     optim_cfg: OptimConfig = MEMORIZE_OPTIM_CONFIG, verbose: bool = False) -> MemorizationResult:
    """Fit the 16-clip set and report train top-1 plus any loss increase after step 20"""
    manifest, clips = synth_dataset(memorize_synth_config(seed))
    data = SkeletonDataset.from_clips(clips, manifest, "train", model_cfg.target_t)
    result = train(model_cfg, replace(optim_cfg, seed=seed), manifest, train_data=data)
    losses = list(result.report.step_losses)
    outcome = MemorizationResult(seed, evaluate_model(result.model, data).top1, losses, loss_increases(losses))
    if verbose:
        mark = "✅" if outcome.passed else "❌"
        print(f"{mark} seed {seed}: train top-1 {outcome.top1:.3f}, loss {losses[0]:.4f} → {losses[-1]:.4f}, "
              f"{len(outcome.increases)} increases after step 20")
    return outcome
