# core/config.py
"""
Model and optimizer configuration, runtime settings and configuration hashing.

A single JSON document {"model": {...}, "optim": {...}} carries both configs.
Runtime settings (output/data folders, worker count, verbosity) come from the
environment, optionally through a .env file.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv

from .data_pipeline import Modality
from .errors import ConfigError
from .gcn_backbone import DEFAULT_CHANNELS, DEFAULT_STRIDE_BLOCKS
from .skeleton_graph import PartitionStrategy, Topology

load_dotenv(override=False)


# K_t and λ defaults per input stream
MODALITY_DEFAULTS = {
    Modality.JOINT: {"kernel_size": 7, "lambda": 0.3},
    Modality.BONE: {"kernel_size": 3, "lambda": 0.5},
}


@dataclass
class ModelConfig:
    topology: str = "body18"
    num_joints: Optional[int] = None
    topology_path: Optional[str] = None
    partition: str = PartitionStrategy.SPATIAL_CONFIG.value
    channels: Tuple[int, ...] = DEFAULT_CHANNELS
    stride_blocks: Tuple[int, ...] = DEFAULT_STRIDE_BLOCKS
    block_kernel: int = 9
    in_channels: int = 3
    taps: Optional[Tuple[int, ...]] = (4, 7, 10)
    kernel_size: Optional[int] = None
    lambda_internal: Optional[float] = None
    lambda_fusion: Optional[float] = None
    learn_lambda: bool = False
    modality: str = Modality.JOINT.value
    num_classes: int = 7
    target_t: int = 150
    eps: float = 1e-5

    @property
    def use_cascade(self) -> bool:
        return bool(self.taps)

    def resolved(self) -> "ModelConfig":
        """Fill unset K_t and λ values from the modality defaults"""
        try:
            defaults = MODALITY_DEFAULTS[Modality(self.modality)]
        except ValueError:
            raise ConfigError(f"modality: expected joint or bone, got '{self.modality}'")
        lam = self.lambda_internal if self.lambda_internal is not None else defaults["lambda"]
        return replace(
            self,
            kernel_size=self.kernel_size if self.kernel_size is not None else defaults["kernel_size"],
            lambda_internal=lam,
            lambda_fusion=self.lambda_fusion if self.lambda_fusion is not None else lam,
        )

    def validate(self) -> Tuple[bool, List[str]]:
        issues = []
        if self.topology not in {t.value for t in Topology}:
            issues.append(f"topology: unknown '{self.topology}'")
        if self.topology == Topology.CHAIN.value and (self.num_joints is None or self.num_joints < 2):
            issues.append("num_joints: chain topology needs at least 2 joints")
        if self.topology == Topology.CUSTOM.value and not self.topology_path:
            issues.append("topology_path: custom topology needs a JSON document")
        if self.partition not in {p.value for p in PartitionStrategy}:
            issues.append(f"partition: unknown '{self.partition}'")
        if self.modality not in {m.value for m in Modality}:
            issues.append(f"modality: expected joint or bone, got '{self.modality}'")
        if not self.channels or any(int(c) < 1 for c in self.channels):
            issues.append(f"channels: need positive channel counts, got {list(self.channels)}")
        blocks = len(self.channels)
        for b in self.stride_blocks:
            if not 1 <= b <= blocks:
                issues.append(f"stride_blocks: block {b} outside [1, {blocks}]")
        if self.block_kernel < 1 or self.block_kernel % 2 == 0:
            issues.append(f"block_kernel: must be odd and positive, got {self.block_kernel}")
        if self.in_channels < 1:
            issues.append(f"in_channels: must be positive, got {self.in_channels}")
        if self.taps:
            taps = list(self.taps)
            if any(b < 1 or b > blocks for b in taps):
                issues.append(f"taps: blocks must lie in [1, {blocks}], got {taps}")
            if any(b2 <= b1 for b1, b2 in zip(taps, taps[1:])):
                issues.append(f"taps: must be strictly increasing, got {taps}")
        if self.kernel_size is not None and (self.kernel_size < 1 or self.kernel_size % 2 == 0):
            issues.append(f"kernel_size: must be odd and positive, got {self.kernel_size}")
        for name in ("lambda_internal", "lambda_fusion"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                issues.append(f"{name}: must lie in [0, 1], got {value}")
        if self.num_classes < 2:
            issues.append(f"num_classes: need at least 2, got {self.num_classes}")
        if self.target_t < 1:
            issues.append(f"target_t: must be positive, got {self.target_t}")
        if self.eps < 0:
            issues.append(f"eps: must be non-negative, got {self.eps}")
        return not issues, issues

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["channels"] = list(self.channels)
        data["stride_blocks"] = list(self.stride_blocks)
        data["taps"] = list(self.taps) if self.taps else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = _known_fields(cls, data, "model")
        for key in ("channels", "stride_blocks"):
            if key in data:
                data[key] = tuple(int(v) for v in data[key])
        if data.get("taps") is not None:
            data["taps"] = tuple(int(v) for v in data["taps"]) or None
        return cls(**data)


@dataclass
class OptimConfig:
    lr_max: float = 0.1
    lr_min: float = 0.0001
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0004
    epochs: int = 90
    warmup_epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    decay_exempt: bool = True
    # clips per forward/backward pass; gradients of the chunks are summed into one step
    micro_batch: Optional[int] = None

    def validate(self) -> Tuple[bool, List[str]]:
        issues = []
        if not 0 <= self.lr_min < self.lr_max:
            issues.append(f"lr_min/lr_max: need 0 <= lr_min < lr_max, got {self.lr_min}/{self.lr_max}")
        if not 0 <= self.momentum < 1:
            issues.append(f"momentum: must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            issues.append(f"weight_decay: must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            issues.append(f"epochs: must be positive, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            issues.append(f"warmup_epochs: need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}")
        if self.batch_size < 1:
            issues.append(f"batch_size: must be positive, got {self.batch_size}")
        if self.micro_batch is not None and self.micro_batch < 1:
            issues.append(f"micro_batch: must be positive when set, got {self.micro_batch}")
        if not 0 <= self.seed < 2 ** 64:
            issues.append(f"seed: must be an unsigned 64-bit integer, got {self.seed}")
        return not issues, issues

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OptimConfig":
        return cls(**_known_fields(cls, data, "optim"))


def _known_fields(cls, data: Dict[str, Any], section: str) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{section}: unknown fields {sorted(unknown)}")
    return dict(data)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> Tuple[bool, List[str]]:
        ok_m, issues_m = self.model.validate()
        ok_o, issues_o = self.optim.validate()
        return ok_m and ok_o, [f"model.{i}" for i in issues_m] + [f"optim.{i}" for i in issues_o]

    def require_valid(self) -> "ExperimentConfig":
        ok, issues = self.validate()
        if not ok:
            raise ConfigError("; ".join(issues))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model.to_dict(), "optim": self.optim.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        unknown = set(data) - {"model", "optim"}
        if unknown:
            raise ConfigError(f"config: unknown sections {sorted(unknown)}")
        try:
            return cls(ModelConfig.from_dict(data.get("model", {})),
                       OptimConfig.from_dict(data.get("optim", {})))
        except TypeError as e:
            raise ConfigError(f"config: {e}")

    @property
    def config_hash(self) -> str:
        return config_hash(self.model, self.optim)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: {path} is not valid JSON ({e})")
    return ExperimentConfig.from_dict(data).require_valid()


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(model: ModelConfig, optim: Optional[OptimConfig] = None) -> str:
    payload = {"model": model.to_dict(), "optim": optim.to_dict() if optim else None}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


PRESETS = {
    "fencing": ExperimentConfig(ModelConfig(topology="body18", num_classes=7, target_t=150),
                                OptimConfig(micro_batch=4)),
    "skating": ExperimentConfig(ModelConfig(topology="body25", num_classes=10, target_t=1500),
                                OptimConfig(micro_batch=1)),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown '{name}' (available: {', '.join(PRESETS)})")
    base = PRESETS[name]
    return ExperimentConfig(replace(base.model), replace(base.optim))


@dataclass
class Settings:
    output_dir: Path = Path("output")
    data_dir: Path = Path("data")
    workers: int = 1
    verbose: bool = True

    @classmethod
    def from_env(cls) -> "Settings":
        try:
            workers = int(os.getenv("CFSC_WORKERS", "1"))
        except ValueError:
            raise ConfigError(f"CFSC_WORKERS: expected an integer, got '{os.getenv('CFSC_WORKERS')}'")
        return cls(
            output_dir=Path(os.getenv("CFSC_OUTPUT_DIR", "output")),
            data_dir=Path(os.getenv("CFSC_DATA_DIR", "data")),
            workers=max(1, workers),
            verbose=os.getenv("CFSC_VERBOSE", "1").strip().lower() not in {"0", "false", "no"},
        )
