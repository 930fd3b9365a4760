# core/training.py
"""
Learning-rate schedule, Nesterov SGD, the training loop and evaluation metrics.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import ModelConfig, OptimConfig, config_hash
from .data_pipeline import DatasetManifest, SkeletonDataset, Split
from .errors import ConfigError, NumericError, ShapeError, shape_str
from .model import SkeletonActionModel
from .parameter_store import ParameterStore
from .tensor_autograd import Tape, Tensor, scale, softmax_cross_entropy

CHECKPOINT_NAME = "checkpoint.cfsc"


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def cosine_lr(step: float, total: float, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at step == total"""
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def lr_schedule(epoch: int, cfg: OptimConfig) -> float:
    """Linear warmup lr_max·(e+1)/warmup, then cosine annealing over the remaining epochs"""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"lr_schedule: epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_max * (epoch + 1) / cfg.warmup_epochs
    return cosine_lr(epoch - cfg.warmup_epochs, cfg.epochs - cfg.warmup_epochs, cfg.lr_max, cfg.lr_min)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class SGDState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: SGDState, lr: float,
             cfg: OptimConfig, decay_mask: Optional[Mapping[str, bool]] = None) -> SGDState:
    """
    One SGD update with coupled weight decay and (Nesterov) momentum:
    g ← g + wd·p;  v ← μv + g;  p ← p − lr·(g + μv)  (plain momentum: p ← p − lr·v).
    Parameters whose decay_mask entry is False skip the decay term.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ShapeError(f"sgd_step: no gradient for parameter '{name}'")
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient for '{name}' is {shape_str(g.shape)}, "
                             f"parameter is {shape_str(p.shape)}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericError(f"sgd_step: {bad} non-finite gradient entries in '{name}' at step {state.steps + 1}")

    for name, p in params.items():
        g = grads[name]
        decays = decay_mask.get(name, True) if decay_mask is not None else True
        if cfg.weight_decay and decays:
            g = g + cfg.weight_decay * p.data
        v = state.velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        update = g + cfg.momentum * v if cfg.nesterov else v
        p.data -= lr * update
    state.steps += 1
    return state


class NesterovSGD:
    """SGD bound to a ParameterStore; masks, biases and λ skip decay when cfg.decay_exempt"""

    def __init__(self, store: ParameterStore, cfg: OptimConfig):
        self.store = store
        self.cfg = cfg
        self.state = SGDState()
        self.decay_mask = store.decay_mask() if cfg.decay_exempt else None

    def step(self, lr: float):
        params = dict(self.store.items())
        sgd_step(params, self.store.grads(), self.state, lr, self.cfg, self.decay_mask)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationResult:
    top1: float
    per_class: List[Optional[float]]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    class_names: List[str]
    predictions: np.ndarray
    labels: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def confusion_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.confusion, index=pd.Index(self.class_names, name="true"),
                            columns=self.class_names)

    def per_class_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"class": self.class_names, "support": self.support,
                             "accuracy": [np.nan if a is None else a for a in self.per_class]})

    def to_dict(self) -> Dict[str, Any]:
        return {"top1": self.top1, "per_class": dict(zip(self.class_names, self.per_class)),
                "confusion": self.confusion.tolist(), "classes": list(self.class_names)}


def summarize_predictions(predictions: Sequence[int], labels: Sequence[int], num_classes: int,
                          class_names: Optional[Sequence[str]] = None) -> EvaluationResult:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.size} predictions for {labels.size} labels")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(num_classes)]
    top1 = float(np.mean(predictions == labels)) if labels.size else 0.0
    names = list(class_names) if class_names is not None else [f"class_{c}" for c in range(num_classes)]
    return EvaluationResult(top1, per_class, confusion, names, predictions, labels)


def predict(model: SkeletonActionModel, values: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Arg-max class per clip; ties resolve to the lowest class index"""
    preds = []
    for start in range(0, len(values), batch_size):
        logits = model(Tensor(values[start:start + batch_size])).logits
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate_model(model: SkeletonActionModel, dataset: SkeletonDataset,
                   class_names: Optional[Sequence[str]] = None, batch_size: int = 32) -> EvaluationResult:
    preds = predict(model, dataset.values, batch_size)
    return summarize_predictions(preds, dataset.labels, model.config.num_classes, class_names)


def evaluate(checkpoint: Union[str, Path, SkeletonActionModel], manifest: DatasetManifest,
             split: Union[Split, str] = Split.VAL, workers: int = 1) -> EvaluationResult:
    model = checkpoint if isinstance(checkpoint, SkeletonActionModel) else SkeletonActionModel.load(checkpoint)
    if manifest.num_classes != model.config.num_classes:
        raise ConfigError(f"class mismatch: manifest has {manifest.num_classes} classes, "
                          f"checkpoint was trained for {model.config.num_classes}")
    dataset = SkeletonDataset(manifest, split, model.num_frames, model.config.modality, model.graph, workers)
    if len(dataset) == 0:
        raise ConfigError(f"split '{Split(split).value}' has no clips")
    return evaluate_model(model, dataset, manifest.classes)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: Optional[float]
    lr: float


@dataclass
class TrainReport:
    config_hash: str
    seed: int
    epochs: List[EpochRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_acc: Optional[float] = None
    model_config: Dict[str, Any] = field(default_factory=dict)
    optim_config: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_val_acc(self) -> Optional[float]:
        return self.epochs[-1].val_acc if self.epochs else None

    @property
    def final_train_acc(self) -> Optional[float]:
        return self.epochs[-1].train_acc if self.epochs else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "epochs": [vars(r).copy() for r in self.epochs],
            "step_losses": list(self.step_losses),
            "final_val_acc": self.final_val_acc,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "model_config": self.model_config,
            "optim_config": self.optim_config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainReport":
        return cls(data["config_hash"], int(data["seed"]), [EpochRecord(**r) for r in data.get("epochs", [])],
                   list(data.get("step_losses", [])), data.get("best_epoch"), data.get("best_val_acc"),
                   data.get("model_config", {}), data.get("optim_config", {}))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.epochs], columns=["epoch", "loss", "train_acc", "val_acc", "lr"])

    def save_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(f"# config_hash={self.config_hash} seed={self.seed}\n")
            self.to_frame().to_csv(f, index=False)
        return path


@dataclass
class TrainResult:
    report: TrainReport
    model: SkeletonActionModel
    checkpoint_path: Optional[Path] = None


def train_step(model: SkeletonActionModel, x: Tensor, y: np.ndarray, micro_batch: Optional[int] = None):
    """
    Forward and backward over one batch, leaving the summed gradient on the
    parameters. With micro_batch the batch runs in chunks whose losses are
    weighted by chunk size, so the gradient is that of the full-batch mean.
    Returns the mean loss and the number of correct predictions.
    """
    size = len(y)
    chunk = size if micro_batch is None else min(int(micro_batch), size)
    model.store.zero_grad()
    loss_sum, correct = 0.0, 0
    for start in range(0, size, chunk):
        xs = x if chunk == size else Tensor(x.data[start:start + chunk])
        ys = y[start:start + chunk]
        with Tape() as tape:
            loss, probs = softmax_cross_entropy(model(xs).logits, ys)
            weighted = loss if chunk == size else scale(loss, len(ys) / size)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite training loss {value}")
        tape.backward(weighted)
        loss_sum += value * len(ys)
        correct += int(np.sum(np.argmax(probs, axis=1) == ys))
    return loss_sum / size, correct


def train(model_cfg: ModelConfig, optim_cfg: OptimConfig, manifest: DatasetManifest,
          out_dir: Optional[Union[str, Path]] = None, verbose: bool = False,
          max_steps: Optional[int] = None, workers: int = 1,
          train_data: Optional[SkeletonDataset] = None,
          val_data: Optional[SkeletonDataset] = None) -> TrainResult:
    """
    Run the full epoch loop. The checkpoint holds the parameters of the epoch
    with the best validation top-1 (earliest on ties), or the last epoch when
    there is no validation split. Everything is a function of the configs,
    the seed and the data.
    """
    for ok, issues in (model_cfg.validate(), optim_cfg.validate()):
        if not ok:
            raise ConfigError("; ".join(issues))

    model = SkeletonActionModel(model_cfg, seed=optim_cfg.seed)
    if manifest.num_classes != model.config.num_classes:
        raise ConfigError(f"class mismatch: manifest has {manifest.num_classes} classes, "
                          f"model_config.num_classes is {model.config.num_classes}")
    if train_data is None:
        train_data = SkeletonDataset(manifest, Split.TRAIN, model.num_frames, model.config.modality,
                                     model.graph, workers)
    if val_data is None and manifest.records(Split.VAL):
        val_data = SkeletonDataset(manifest, Split.VAL, model.num_frames, model.config.modality,
                                   model.graph, workers)

    report = TrainReport(config_hash(model.config, optim_cfg), optim_cfg.seed,
                         model_config=model.config.to_dict(), optim_config=optim_cfg.to_dict())
    out_path = Path(out_dir) if out_dir is not None else None
    checkpoint = out_path / CHECKPOINT_NAME if out_path is not None else None
    optimizer = NesterovSGD(model.store, optim_cfg)
    eval_batch = optim_cfg.micro_batch or 32

    if verbose:
        print(f"🚀 Training {model.store.count():,} parameters on {len(train_data)} clips "
              f"(hash {report.config_hash}, seed {optim_cfg.seed})")
        for warning in model.tap_warnings:
            print(f"⚠️  {warning}")

    for epoch in range(optim_cfg.epochs):
        lr = lr_schedule(epoch, optim_cfg)
        loss_sum, correct, seen = 0.0, 0, 0
        batches = train_data.batches(optim_cfg.batch_size, optim_cfg.seed, epoch)
        for x, y in tqdm(batches, desc=f"epoch {epoch + 1}/{optim_cfg.epochs}", leave=False,
                         disable=not verbose, total=-(-len(train_data) // optim_cfg.batch_size)):
            try:
                value, hits = train_step(model, x, y, optim_cfg.micro_batch)
            except NumericError as e:
                raise NumericError(f"{e} at epoch {epoch + 1}, step {optimizer.state.steps + 1}")
            optimizer.step(lr)

            report.step_losses.append(value)
            loss_sum += value * len(y)
            correct += hits
            seen += len(y)
            if max_steps is not None and optimizer.state.steps >= max_steps:
                break

        val_acc = evaluate_model(model, val_data, batch_size=eval_batch).top1 if val_data is not None else None
        report.epochs.append(EpochRecord(epoch, loss_sum / seen, correct / seen, val_acc, lr))
        if verbose:
            val_text = f", val top-1 {val_acc:.3f}" if val_acc is not None else ""
            print(f"📈 epoch {epoch + 1}: loss {loss_sum / seen:.4f}, train top-1 {correct / seen:.3f}{val_text}, lr {lr:.6f}")

        improved = val_acc is not None and (report.best_val_acc is None or val_acc > report.best_val_acc)
        if improved:
            report.best_epoch, report.best_val_acc = epoch, val_acc
            if checkpoint is not None:
                model.save(checkpoint, optim_cfg, {"epoch": epoch, "val_acc": val_acc})
        if max_steps is not None and optimizer.state.steps >= max_steps:
            break

    if val_data is None:
        report.best_epoch = report.epochs[-1].epoch
        if checkpoint is not None:
            model.save(checkpoint, optim_cfg, {"epoch": report.best_epoch, "val_acc": None})

    if out_path is not None:
        report.save_json(out_path / "report.json")
        report.save_csv(out_path / "report.csv")
        if verbose:
            print(f"💾 Report and checkpoint saved to {out_path}")
    if verbose and report.best_val_acc is not None:
        print(f"✅ Best val top-1 {report.best_val_acc:.3f} at epoch {report.best_epoch + 1}")
    return TrainResult(report, model, checkpoint)
