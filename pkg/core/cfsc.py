# core/cfsc.py
"""
Cross-block fine-grained semantic cascade.

Selected block outputs are folded shallow-to-deep: each level adds λ times the
previous level's aligned feature to its own block output and passes the sum
through a temporal convolution whose stride and width match the next operand.
The last level is normalized per channel and rectified into the auxiliary
feature F_dis, which is added (λ-weighted) to the final block output before
pooling and classification.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

from .errors import ConfigError, ShapeError, shape_str
from .gcn_backbone import BackboneSchedule, BlockOutputs
from .parameter_store import ParameterStore
from .tensor_autograd import Tensor, add, channel_norm, conv_temporal, global_avg_pool, linear, relu, scale

Scalar = Union[float, Tensor]

# Tap sets compared in the block-selection ablation, headline set first
REFERENCE_TAP_SETS: Tuple[Tuple[int, ...], ...] = (
    (4, 7, 10), (1, 10), (4, 10), (7, 10), (1, 5, 10), (1, 4, 7, 10),
)


@dataclass(frozen=True)
class TapSet:
    blocks: Tuple[int, ...]

    @classmethod
    def parse(cls, text: str) -> "TapSet":
        """'4,7,10' → TapSet((4, 7, 10))"""
        try:
            blocks = tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok)
        except ValueError:
            raise ConfigError(f"taps: cannot parse '{text}' as comma-separated block indices")
        return cls(blocks)

    @property
    def size(self) -> int:
        return len(self.blocks)

    def validate(self, num_blocks: int = 10) -> Tuple[bool, List[str]]:
        issues = []
        if not self.blocks:
            issues.append("taps: at least one block is required")
        for b in self.blocks:
            if not 1 <= b <= num_blocks:
                issues.append(f"taps: block {b} outside [1, {num_blocks}]")
        if any(b2 <= b1 for b1, b2 in zip(self.blocks, self.blocks[1:])):
            issues.append(f"taps: {list(self.blocks)} is not strictly increasing")
        return not issues, issues

    def require_valid(self, num_blocks: int = 10) -> "TapSet":
        ok, issues = self.validate(num_blocks)
        if not ok:
            raise ConfigError("; ".join(issues))
        return self

    def selection_warnings(self, schedule: BackboneSchedule) -> List[str]:
        """Soft criteria: varied depth coverage, no adjacent blocks, at most four taps"""
        warnings = []
        stages = schedule.depth_stages()
        covered = sum(1 for stage in stages if any(b in stage for b in self.blocks))
        if covered < 2:
            warnings.append(f"taps {list(self.blocks)} cover {covered} of {len(stages)} depth stages")
        adjacent = [(b1, b2) for b1, b2 in zip(self.blocks, self.blocks[1:]) if b2 - b1 == 1]
        if adjacent:
            warnings.append(f"taps {list(self.blocks)} include adjacent blocks {adjacent}")
        if self.size > 4:
            warnings.append(f"taps {list(self.blocks)} use {self.size} blocks (more than 4)")
        return warnings


@dataclass(frozen=True)
class LevelTC:
    level: int
    source_block: int
    target_block: int
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int
    in_length: int
    out_length: int

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2


@dataclass
class CascadeParams:
    weights: List[Tensor] = field(default_factory=list)
    biases: List[Tensor] = field(default_factory=list)


@dataclass
class CascadeResult:
    levels: List[Tensor]
    normalized: Tensor  # F_M′, before the rectifier
    f_dis: Tensor


def plan_cascade(schedule: BackboneSchedule, taps: TapSet, kernel_size: int, num_frames: int) -> List[LevelTC]:
    """
    Derive every level's temporal convolution from the schedule's shapes.

    Level v reads f_{b_v} (plus the previous level) and must produce the
    geometry of the next operand: f_{b_{v+1}}, or the last block output for
    the final level. Same padding makes the stride alone set the length.
    """
    taps.require_valid(schedule.num_blocks)
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"cascade kernel size must be odd and positive, got {kernel_size}")
    shapes = schedule.output_shapes(num_frames)
    final = schedule.num_blocks

    plan = []
    for v, source in enumerate(taps.blocks):
        target = taps.blocks[v + 1] if v + 1 < taps.size else final
        (c_in, t_in), (c_out, t_out) = shapes[source - 1], shapes[target - 1]
        if t_in % t_out:
            raise ShapeError(f"cascade level {v + 1}: length ratio {t_in}/{t_out} "
                             f"(block {source} → block {target}) is not an integer")
        stride = t_in // t_out
        plan.append(LevelTC(v + 1, source, target, c_in, c_out, kernel_size, stride, t_in, t_out))
    return plan


def init_cascade_params(store: ParameterStore, plan: Sequence[LevelTC]) -> CascadeParams:
    params = CascadeParams()
    for level in plan:
        params.weights.append(store.uniform(f"cascade.level{level.level}.weight",
                                            (level.out_channels, level.in_channels, level.kernel_size),
                                            level.in_channels * level.kernel_size))
        params.biases.append(store.zeros(f"cascade.level{level.level}.bias", (level.out_channels,)))
    return params


def cascade_forward(outputs: BlockOutputs, plan: Sequence[LevelTC], params: CascadeParams,
                    lam: Scalar, eps: float = 1e-5) -> CascadeResult:
    """F_1 = TC_1(f_b1); F_v = TC_v(f_bv + λ·F_{v−1}); F_dis = relu(channel_norm(F_M))"""
    if not plan:
        raise ConfigError("cascade_forward needs at least one level")
    if len(params.weights) != len(plan):
        raise ShapeError(f"cascade has {len(params.weights)} level weights for {len(plan)} levels")

    levels: List[Tensor] = []
    previous: Optional[Tensor] = None
    for level, weight, bias in zip(plan, params.weights, params.biases):
        tapped = outputs.block(level.source_block)
        if tapped.shape[-3:-1] != (level.in_channels, level.in_length):
            raise ShapeError(f"cascade level {level.level}: block {level.source_block} output is "
                             f"{shape_str(tapped.shape)}, plan expects {level.in_channels}×{level.in_length}")
        if previous is None:
            aggregate = tapped
        else:
            if previous.shape != tapped.shape:
                raise ShapeError(f"cascade level {level.level}: previous level {shape_str(previous.shape)} "
                                 f"does not align with block {level.source_block} {shape_str(tapped.shape)}")
            aggregate = add(tapped, scale(previous, lam))
        previous = conv_temporal(aggregate, weight, bias, level.stride, level.padding)
        levels.append(previous)

    normalized = channel_norm(previous, eps)
    return CascadeResult(levels, normalized, relu(normalized))


def fuse_final(f_last: Tensor, f_dis: Tensor, lam: Scalar) -> Tensor:
    """F_d = f_10 + λ·F_dis"""
    if f_last.shape != f_dis.shape:
        raise ShapeError(f"fuse_final: f_10 {shape_str(f_last.shape)} and F_dis {shape_str(f_dis.shape)} differ")
    return add(f_last, scale(f_dis, lam))


def classify(features: Tensor, weight: Tensor, bias: Optional[Tensor], num_classes: int) -> Tensor:
    """Global average pooling over T×N followed by an affine map to class logits"""
    if weight.shape[0] != num_classes:
        raise ShapeError(f"classify: classifier has {weight.shape[0]} outputs for {num_classes} classes")
    if weight.shape[1] != features.shape[-3]:
        raise ShapeError(f"classify: classifier expects {weight.shape[1]} channels, "
                         f"feature has {features.shape[-3]}")
    return linear(global_avg_pool(features), weight, bias)
