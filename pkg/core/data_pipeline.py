# core/data_pipeline.py
"""
Skeleton clip ingestion: clip and manifest documents, replay padding, bone
derivation and seeded batching.

Clip document:
    {"version": 1, "num_joints": N, "channels": 3, "fps": 30.0, "label": 2,
     "subject": "s03", "frames": [[[x, y, z] × N] × T]}
Manifest document:
    {"classes": [...], "topology": "body18", "target_t": 150,
     "clips": [{"path": ..., "label": ..., "subject": ..., "split": "train"|"val"}]}
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError, shape_str
from .skeleton_graph import SkeletonGraph, Topology, build_graph
from .tensor_autograd import Tensor

CLIP_VERSION = 1
CLIP_CHANNELS = 3


class Split(Enum):
    TRAIN = "train"
    VAL = "val"


class Modality(Enum):
    JOINT = "joint"
    BONE = "bone"


@dataclass
class SkeletonClip:
    values: np.ndarray  # C×T_raw×N: x, y, confidence
    label: int
    subject: str
    fps: float = 30.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[1])

    @property
    def num_joints(self) -> int:
        return int(self.values.shape[2])

    def validate(self) -> Tuple[bool, List[str]]:
        issues = []
        if self.values.ndim != 3 or self.values.shape[0] != CLIP_CHANNELS:
            issues.append(f"values must be {CLIP_CHANNELS}×T×N, got {shape_str(self.values.shape)}")
            return False, issues
        if self.num_frames < 1:
            issues.append("clip has no frames")
        if not np.all(np.isfinite(self.values)):
            issues.append("clip contains non-finite values")
        conf = self.values[2]
        bad = np.argwhere((conf < 0) | (conf > 1))
        if bad.size:
            t, j = bad[0]
            issues.append(f"confidence {conf[t, j]} outside [0, 1] at frame {t}, joint {j}")
        if self.label < 0:
            issues.append(f"label must be non-negative, got {self.label}")
        return not issues, issues

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": CLIP_VERSION,
            "num_joints": self.num_joints,
            "channels": CLIP_CHANNELS,
            "fps": float(self.fps),
            "label": int(self.label),
            "subject": str(self.subject),
            "frames": self.values.transpose(1, 2, 0).tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], source: str = "clip") -> "SkeletonClip":
        missing = {"num_joints", "channels", "label", "subject", "frames"} - set(doc)
        if missing:
            raise ConfigError(f"{source}: missing fields {sorted(missing)}")
        if doc.get("version", CLIP_VERSION) != CLIP_VERSION:
            raise ConfigError(f"{source}: unsupported clip version {doc['version']}")
        n, c = int(doc["num_joints"]), int(doc["channels"])
        if c != CLIP_CHANNELS:
            raise ConfigError(f"{source}: channels must be {CLIP_CHANNELS}, header says {c}")
        frames = doc["frames"]
        if not isinstance(frames, list) or not frames:
            raise ConfigError(f"{source}: 'frames' must be a non-empty list")

        values = np.empty((len(frames), n, c), dtype=np.float64)
        for t, frame in enumerate(frames):
            if not isinstance(frame, list) or len(frame) != n:
                arity = len(frame) if isinstance(frame, list) else type(frame).__name__
                raise ConfigError(f"{source}: frame {t} has {arity} joints, header says {n}")
            for j, joint in enumerate(frame):
                if not isinstance(joint, list) or len(joint) != c:
                    raise ConfigError(f"{source}: frame {t}, joint {j} must hold {c} numbers")
            try:
                values[t] = frame
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{source}: frame {t} is not numeric ({e})")

        clip = cls(values.transpose(2, 0, 1), int(doc["label"]), str(doc["subject"]), float(doc.get("fps", 30.0)))
        ok, issues = clip.validate()
        if not ok:
            raise ConfigError(f"{source}: " + "; ".join(issues))
        return clip


def write_clip(clip: SkeletonClip, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(clip.to_dict(), f, separators=(",", ":"))
    return path


def load_clip(path: Union[str, Path]) -> SkeletonClip:
    path = Path(path)
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read clip {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"clip {path} is not valid JSON ({e})")
    if not isinstance(doc, dict):
        raise ConfigError(f"clip {path} must be a JSON object")
    return SkeletonClip.from_dict(doc, source=str(path))


@dataclass
class ClipRecord:
    path: str
    label: int
    subject: str
    split: str = Split.TRAIN.value


@dataclass
class DatasetManifest:
    classes: List[str]
    topology: str = Topology.BODY18.value
    target_t: int = 150
    clips: List[ClipRecord] = field(default_factory=list)
    root: Optional[Path] = None  # folder that relative clip paths resolve against

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def records(self, split: Union[Split, str]) -> List[ClipRecord]:
        split = Split(split).value
        return [r for r in self.clips if r.split == split]

    def subjects(self, split: Union[Split, str]) -> set:
        return {r.subject for r in self.records(split)}

    def resolve(self, record: ClipRecord) -> Path:
        path = Path(record.path)
        return path if path.is_absolute() or self.root is None else self.root / path

    def validate(self) -> Tuple[bool, List[str]]:
        issues = []
        if len(self.classes) < 2:
            issues.append(f"manifest needs at least 2 classes, got {len(self.classes)}")
        if self.target_t < 1:
            issues.append(f"target_t must be positive, got {self.target_t}")
        splits = {s.value for s in Split}
        for r in self.clips:
            if r.split not in splits:
                issues.append(f"clip {r.path}: split '{r.split}' is not train or val")
            if not 0 <= r.label < len(self.classes):
                issues.append(f"clip {r.path}: label {r.label} outside [0, {len(self.classes)})")
        shared = self.subjects(Split.TRAIN) & self.subjects(Split.VAL)
        if shared:
            issues.append(f"subjects appear in both train and val: {sorted(shared)}")
        return not issues, issues

    def require_valid(self) -> "DatasetManifest":
        ok, issues = self.validate()
        if not ok:
            raise ConfigError("manifest: " + "; ".join(issues))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"classes": list(self.classes), "topology": self.topology, "target_t": int(self.target_t),
                "clips": [asdict(r) for r in self.clips]}

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], root: Optional[Path] = None) -> "DatasetManifest":
        missing = {"classes", "clips"} - set(doc)
        if missing:
            raise ConfigError(f"manifest: missing fields {sorted(missing)}")
        try:
            clips = [ClipRecord(str(c["path"]), int(c["label"]), str(c["subject"]), str(c.get("split", "train")))
                     for c in doc["clips"]]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"manifest: malformed clip record ({e})")
        return cls(list(doc["classes"]), str(doc.get("topology", Topology.BODY18.value)),
                   int(doc.get("target_t", 150)), clips, root)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.require_valid()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Load a manifest and recheck label range and subject-disjointness"""
    path = Path(path)
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read manifest {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"manifest {path} is not valid JSON ({e})")
    return DatasetManifest.from_dict(doc, root=path.parent).require_valid()


# ---------------------------------------------------------------------------
# Clip transforms
# ---------------------------------------------------------------------------

def replay_pad(values: np.ndarray, target_t: int) -> np.ndarray:
    """Frame t of the output is input frame t mod T_raw; longer clips keep their first target_t frames"""
    values = np.asarray(values, dtype=np.float64)
    if target_t < 1:
        raise ConfigError(f"replay_pad: target length must be positive, got {target_t}")
    t_raw = values.shape[1]
    if t_raw < 1:
        raise ShapeError("replay_pad: clip has no frames")
    return values[:, np.arange(target_t) % t_raw, :]


def to_bone(values: np.ndarray, graph: SkeletonGraph) -> np.ndarray:
    """
    Bone vectors toward the graph center: x,y of joint j minus x,y of its
    parent; the center's bone is zero. Confidence is the weaker endpoint.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != graph.num_joints:
        raise ShapeError(f"to_bone: clip has {values.shape[-1]} joints, graph '{graph.name}' has {graph.num_joints}")
    parents = graph.parents
    bones = np.empty_like(values)
    bones[:2] = values[:2] - values[:2, :, parents]
    bones[2] = np.minimum(values[2], values[2][:, parents])
    return bones


def prepare_clip(clip: SkeletonClip, num_frames: int, modality: Union[Modality, str] = Modality.JOINT,
                 graph: Optional[SkeletonGraph] = None) -> np.ndarray:
    values = replay_pad(clip.values, num_frames)
    if Modality(modality) is Modality.BONE:
        if graph is None:
            raise ConfigError("bone modality needs a skeleton graph")
        values = to_bone(values, graph)
    return values


def graph_for_manifest(manifest: DatasetManifest, num_joints: int) -> SkeletonGraph:
    if manifest.topology == Topology.CHAIN.value:
        return build_graph(Topology.CHAIN, num_joints=num_joints)
    return build_graph(manifest.topology)


# ---------------------------------------------------------------------------
# Datasets and batching
# ---------------------------------------------------------------------------

def stack_clips(clips: List[SkeletonClip], num_frames: int, modality: Union[Modality, str] = Modality.JOINT,
                graph: Optional[SkeletonGraph] = None, names: Optional[List[str]] = None) -> np.ndarray:
    """Prepare every clip and stack them into one K×3×T×N array; all clips must share N"""
    if not clips:
        return np.empty((0, CLIP_CHANNELS, num_frames, 0))
    arrays = [prepare_clip(c, num_frames, modality, graph) for c in clips]
    joints = arrays[0].shape[-1]
    for i, values in enumerate(arrays):
        if values.shape[-1] != joints:
            where = names[i] if names else f"clip {i}"
            raise ShapeError(f"{where}: {values.shape[-1]} joints, the first clip of the split has {joints}")
    return np.stack(arrays)


class SkeletonDataset:
    """
    Every clip of one split, padded and converted to the requested modality.

    Decoding may run on several threads; clips are stored in manifest order
    so batch order depends only on (seed, epoch).
    """

    def __init__(self, manifest: DatasetManifest, split: Union[Split, str] = Split.TRAIN,
                 num_frames: Optional[int] = None, modality: Union[Modality, str] = Modality.JOINT,
                 graph: Optional[SkeletonGraph] = None, workers: int = 1):
        self.manifest = manifest
        self.split = Split(split)
        self.modality = Modality(modality)
        self.num_frames = int(num_frames or manifest.target_t)
        self.records = manifest.records(self.split)

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            clips = list(pool.map(lambda r: load_clip(manifest.resolve(r)), self.records))
        for record, clip in zip(self.records, clips):
            if clip.label != record.label:
                raise ConfigError(f"clip {record.path}: label {clip.label} disagrees with manifest label {record.label}")

        if clips and graph is None and self.modality is Modality.BONE:
            graph = graph_for_manifest(manifest, clips[0].num_joints)
        self.graph = graph
        self.values = stack_clips(clips, self.num_frames, self.modality, graph, [r.path for r in self.records])
        self.labels = np.array([c.label for c in clips], dtype=np.int64)

    @classmethod
    def from_clips(cls, clips: List[SkeletonClip], manifest: DatasetManifest, split: Union[Split, str],
                   num_frames: int, modality: Union[Modality, str] = Modality.JOINT,
                   graph: Optional[SkeletonGraph] = None) -> "SkeletonDataset":
        """In-memory dataset over already decoded clips"""
        dataset = cls.__new__(cls)
        dataset.manifest, dataset.split = manifest, Split(split)
        dataset.modality, dataset.num_frames, dataset.records = Modality(modality), int(num_frames), []
        if dataset.modality is Modality.BONE and graph is None and clips:
            graph = graph_for_manifest(manifest, clips[0].num_joints)
        dataset.graph = graph
        dataset.values = stack_clips(clips, dataset.num_frames, dataset.modality, graph)
        dataset.labels = np.array([c.label for c in clips], dtype=np.int64)
        return dataset

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, idx: int) -> Tuple[np.ndarray, int]:
        return self.values[idx], int(self.labels[idx])

    def order(self, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
        if not shuffle:
            return np.arange(len(self))
        return np.random.default_rng([int(seed), int(epoch)]).permutation(len(self))

    def batches(self, batch_size: int = 16, seed: int = 0, epoch: int = 0,
                shuffle: bool = True) -> Iterator[Tuple[Tensor, np.ndarray]]:
        if len(self) == 0:
            raise ConfigError(f"split '{self.split.value}' has no clips")
        if batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {batch_size}")
        order = self.order(seed, epoch, shuffle)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield Tensor(self.values[idx]), self.labels[idx]


def batch_iter(manifest: DatasetManifest, split: Union[Split, str] = Split.TRAIN, batch_size: int = 16,
               target_t: Optional[int] = None, modality: Union[Modality, str] = Modality.JOINT,
               seed: int = 0, epoch: int = 0, graph: Optional[SkeletonGraph] = None,
               workers: int = 1) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """Seeded stream of (B×3×T×N batch, labels); the last partial batch is kept"""
    dataset = SkeletonDataset(manifest, split, target_t, modality, graph, workers)
    return dataset.batches(batch_size, seed, epoch)
