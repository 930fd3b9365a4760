# core/synthetic_fencing.py
"""
Seeded kinematic generator for fine-grained footwork and blade actions.

Every class shares the same gross body sway; classes differ only in brief,
zero-mean limb pulses on the feet and hands. Subjects vary in scale, offset,
sway phase, clip length and keypoint confidence, and each clip shifts its
pulses in time, so intra-class variance is large while inter-class differences
stay small. Train and validation subjects never overlap.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .data_pipeline import ClipRecord, DatasetManifest, SkeletonClip, Split, write_clip
from .errors import ConfigError
from .skeleton_graph import CRITICAL_JOINTS, SkeletonGraph, Topology, build_graph

FENCING_CLASSES = (
    "step_forward", "two_step_forward", "step_backward", "thrust_in_place",
    "lunge_in_place", "step_forward_lunge", "sprint",
)

ROLES = ("front_foot", "back_foot", "weapon_hand", "guard_hand")
_ROLE_TO_CRITICAL = {"front_foot": "right_foot", "back_foot": "left_foot",
                     "weapon_hand": "right_hand", "guard_hand": "left_hand"}


@dataclass(frozen=True)
class Pulse:
    role: str
    axis: int       # 0 = x, 1 = y
    center: float   # fraction of the clip
    width: float
    amplitude: float


# Pulse scripts for the seven fencing actions
CLASS_PULSES: Dict[str, Tuple[Pulse, ...]] = {
    "step_forward": (Pulse("front_foot", 0, 0.50, 0.05, 0.30),),
    "two_step_forward": (Pulse("front_foot", 0, 0.35, 0.05, 0.30), Pulse("front_foot", 0, 0.65, 0.05, 0.30)),
    "step_backward": (Pulse("back_foot", 0, 0.50, 0.05, -0.30),),
    "thrust_in_place": (Pulse("weapon_hand", 0, 0.50, 0.04, 0.35),),
    "lunge_in_place": (Pulse("front_foot", 0, 0.50, 0.06, 0.45), Pulse("weapon_hand", 0, 0.48, 0.04, 0.35)),
    "step_forward_lunge": (Pulse("front_foot", 0, 0.30, 0.05, 0.30), Pulse("front_foot", 0, 0.65, 0.06, 0.45),
                           Pulse("weapon_hand", 0, 0.63, 0.04, 0.35)),
    "sprint": tuple(Pulse("front_foot" if k % 2 == 0 else "back_foot", 1, c, 0.04, 0.25)
                    for k, c in enumerate((0.25, 0.40, 0.55, 0.70))),
}


@dataclass
class SynthConfig:
    seed: int = 0
    num_classes: int = 7
    train_clips_per_class: int = 10
    val_clips_per_class: int = 3
    topology: str = Topology.BODY18.value
    num_joints: Optional[int] = None
    min_frames: int = 30
    max_frames: int = 150
    noise: float = 0.01
    target_t: int = 150
    train_subjects: int = 5
    val_subjects: int = 2
    fps: float = 30.0
    # pulse lobes never get narrower than this many frames, so short clips keep the signal
    min_pulse_frames: float = 2.0

    def validate(self) -> Tuple[bool, List[str]]:
        issues = []
        if self.noise < 0:
            issues.append(f"noise: σ must be non-negative, got {self.noise}")
        if self.num_classes < 2:
            issues.append(f"num_classes: need at least 2, got {self.num_classes}")
        if self.train_clips_per_class < 1 or self.val_clips_per_class < 0:
            issues.append("clips per class: need at least one train clip and a non-negative val count")
        if not 1 <= self.min_frames <= self.max_frames:
            issues.append(f"frames: need 1 <= min_frames <= max_frames, got {self.min_frames}/{self.max_frames}")
        if self.train_subjects < 1 or (self.val_clips_per_class and self.val_subjects < 1):
            issues.append("subjects: every used split needs at least one subject")
        if self.target_t < 1:
            issues.append(f"target_t: must be positive, got {self.target_t}")
        if self.min_pulse_frames < 0:
            issues.append(f"min_pulse_frames: must be non-negative, got {self.min_pulse_frames}")
        return not issues, issues


@dataclass
class SubjectProfile:
    name: str
    scale: float
    offset: np.ndarray      # (2,)
    sway_phase: float
    num_frames: int
    confidence: np.ndarray  # (N,)


def class_names(num_classes: int) -> List[str]:
    names = list(FENCING_CLASSES[:num_classes])
    names += [f"action_{c}" for c in range(len(names), num_classes)]
    return names


def rest_pose(graph: SkeletonGraph) -> np.ndarray:
    """2×N resting coordinates: joints fan out from the center by hop distance"""
    hops = graph.hop_to_center
    theta = 2.0 * np.pi * np.arange(graph.num_joints) / graph.num_joints
    return 0.25 * hops[None, :] * np.stack([np.cos(theta), np.sin(theta)])


def role_joints(graph: SkeletonGraph) -> Dict[str, int]:
    critical = CRITICAL_JOINTS.get(graph.name)
    if critical is not None:
        return {role: critical[_ROLE_TO_CRITICAL[role]] for role in ROLES}
    # farthest joints from the center stand in for the limbs
    far = np.argsort(-graph.hop_to_center, kind="stable")
    return {role: int(far[k % len(far)]) for k, role in enumerate(ROLES)}


def biphasic(num_frames: int, center: float, width: float) -> np.ndarray:
    """Zero-mean odd pulse peaking at ±1, one lobe each side of center"""
    tau = (np.arange(num_frames) + 0.5) / num_frames
    u = (tau - center) / width
    shape = u * np.exp(0.5 * (1.0 - u * u))
    return shape - shape.mean()


class FencingSynthesizer:

    def __init__(self, config: Optional[SynthConfig] = None):
        self.config = config or SynthConfig()
        ok, issues = self.config.validate()
        if not ok:
            raise ConfigError("synthetic dataset: " + "; ".join(issues))
        self.graph = build_graph(self.config.topology, num_joints=self.config.num_joints)
        self.rng = np.random.default_rng(self.config.seed)
        self.rest = rest_pose(self.graph)
        self.roles = role_joints(self.graph)
        self.classes = class_names(self.config.num_classes)
        total = self.config.train_subjects + (self.config.val_subjects if self.config.val_clips_per_class else 0)
        self.subjects = [self._draw_subject(i) for i in range(total)]

    def _draw_subject(self, index: int) -> SubjectProfile:
        cfg, n = self.config, self.graph.num_joints
        base = self.rng.uniform(0.6, 0.95)
        depth = self.graph.hop_to_center / max(self.graph.hop_to_center.max(), 1.0)
        return SubjectProfile(
            name=f"s{index:02d}",
            scale=float(self.rng.uniform(0.8, 1.2)),
            offset=self.rng.uniform(-0.5, 0.5, size=2),
            sway_phase=float(self.rng.uniform(0.0, 1.0)),
            num_frames=int(self.rng.integers(cfg.min_frames, cfg.max_frames + 1)),
            confidence=np.clip(base - 0.1 * depth + self.rng.uniform(-0.05, 0.05, size=n), 0.0, 1.0),
        )

    def class_pulses(self, label: int) -> Tuple[Pulse, ...]:
        name = self.classes[label]
        if name in CLASS_PULSES:
            return CLASS_PULSES[name]
        # extra classes beyond the fencing set: role and pulse count from the index
        role = ROLES[label % len(ROLES)]
        count = (label // len(ROLES)) % 3 + 1
        centers = np.linspace(0.3, 0.7, count)
        return tuple(Pulse(role, label % 2, float(c), 0.05, 0.3) for c in centers)

    def trajectory(self, label: int, subject: SubjectProfile, shift: float = 0.0) -> np.ndarray:
        """Noise-free 3×T×N clip for a class, subject and pulse time shift"""
        t_raw = subject.num_frames
        tau = (np.arange(t_raw) + 0.5) / t_raw
        coords = np.broadcast_to(subject.scale * self.rest + subject.offset[:, None],
                                 (t_raw, 2, self.graph.num_joints)).transpose(1, 0, 2).copy()

        sway_x = 0.15 * subject.scale * np.sin(2.0 * np.pi * (tau + subject.sway_phase))
        sway_y = 0.05 * subject.scale * np.sin(2.0 * np.pi * (2.0 * tau + subject.sway_phase))
        coords[0] += sway_x[:, None]
        coords[1] += sway_y[:, None]

        parents = self.graph.parents
        min_width = self.config.min_pulse_frames / t_raw
        for pulse in self.class_pulses(label):
            joint = self.roles[pulse.role]
            width = max(pulse.width, min_width)
            motion = subject.scale * pulse.amplitude * biphasic(t_raw, pulse.center + shift, width)
            coords[pulse.axis, :, joint] += motion
            if parents[joint] != joint:
                coords[pulse.axis, :, parents[joint]] += 0.5 * motion

        confidence = np.broadcast_to(subject.confidence, (t_raw, self.graph.num_joints))
        return np.concatenate([coords, confidence[None]], axis=0)

    def generate(self) -> List[Tuple[SkeletonClip, ClipRecord]]:
        cfg = self.config
        train = self.subjects[:cfg.train_subjects]
        val = self.subjects[cfg.train_subjects:]
        plan = [(Split.TRAIN, cfg.train_clips_per_class, train), (Split.VAL, cfg.val_clips_per_class, val)]

        out = []
        for split, per_class, subjects in plan:
            for label in range(cfg.num_classes):
                for i in range(per_class):
                    subject = subjects[i % len(subjects)]
                    shift = float(self.rng.uniform(-0.08, 0.08))
                    values = self.trajectory(label, subject, shift)
                    if cfg.noise > 0:
                        values[:2] += cfg.noise * self.rng.standard_normal(values[:2].shape)
                        values[2] = np.clip(values[2] + cfg.noise * self.rng.standard_normal(values[2].shape),
                                            0.0, 1.0)
                    clip = SkeletonClip(values, label, subject.name, cfg.fps)
                    path = f"clips/{split.value}/{label:02d}_{i:03d}.json"
                    out.append((clip, ClipRecord(path, label, subject.name, split.value)))
        return out

    def manifest(self, records: List[ClipRecord], root: Optional[Path] = None) -> DatasetManifest:
        return DatasetManifest(self.classes, self.graph.name if self.config.topology != Topology.CHAIN.value
                               else Topology.CHAIN.value, self.config.target_t, records, root).require_valid()


def synth_dataset(config: Optional[SynthConfig] = None, out_dir: Optional[Union[str, Path]] = None,
                  verbose: bool = False) -> Tuple[DatasetManifest, List[SkeletonClip]]:
    """
    Generate the dataset; with out_dir, write every clip plus manifest.json.
    Returns the manifest and the clips in manifest order.
    """
    synth = FencingSynthesizer(config)
    pairs = synth.generate()
    root = Path(out_dir) if out_dir is not None else None
    manifest = synth.manifest([record for _, record in pairs], root)

    if root is not None:
        if verbose:
            print(f"📦 Writing {len(pairs)} synthetic clips to {root}")
        for clip, record in pairs:
            write_clip(clip, root / record.path)
        manifest.save(root / "manifest.json")
        if verbose:
            print(f"💾 Manifest saved: {root / 'manifest.json'}")
    return manifest, [clip for clip, _ in pairs]
