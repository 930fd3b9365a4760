# core/gcn_backbone.py
"""
Spatial-temporal graph convolution backbone.

A block is spatial graph convolution → norm → relu → temporal convolution →
norm → residual sum → relu. Ten blocks with channel widths 64×4, 128×3,
256×3 and temporal stride 2 at blocks 5 and 8 make up the default schedule.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError, shape_str
from .parameter_store import ParameterStore
from .skeleton_graph import AdjacencyStack
from .tensor_autograd import Tensor, add, channel_norm, conv_temporal, matmul, mul, relu

DEFAULT_CHANNELS = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
DEFAULT_STRIDE_BLOCKS = (5, 8)


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    temporal_stride: int = 1
    kernel_size: int = 9
    residual: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"block channels must be positive, got {self.in_channels}→{self.out_channels}")
        if self.temporal_stride not in (1, 2):
            raise ConfigError(f"block temporal stride must be 1 or 2, got {self.temporal_stride}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"block kernel size must be odd and positive, got {self.kernel_size}")

    @property
    def needs_projection(self) -> bool:
        return self.residual and (self.in_channels != self.out_channels or self.temporal_stride != 1)


@dataclass(frozen=True)
class BackboneSchedule:
    blocks: Tuple[BlockSpec, ...]
    input_channels: int = 3

    @classmethod
    def from_channels(cls,
                      channels: Sequence[int] = DEFAULT_CHANNELS,
                      stride_blocks: Sequence[int] = DEFAULT_STRIDE_BLOCKS,
                      kernel_size: int = 9,
                      input_channels: int = 3) -> "BackboneSchedule":
        """Block b reads the output width of block b−1; block 1 reads the embedding width"""
        channels = [int(c) for c in channels]
        if not channels:
            raise ConfigError("backbone needs at least one block")
        for b in stride_blocks:
            if not 1 <= b <= len(channels):
                raise ConfigError(f"stride block {b} outside [1, {len(channels)}]")
        blocks = []
        for b, c_out in enumerate(channels, start=1):
            c_in = channels[0] if b == 1 else channels[b - 2]
            blocks.append(BlockSpec(c_in, c_out, 2 if b in stride_blocks else 1, kernel_size, residual=b > 1))
        return cls(tuple(blocks), input_channels)

    @classmethod
    def default(cls) -> "BackboneSchedule":
        return cls.from_channels()

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def embed_channels(self) -> int:
        return self.blocks[0].in_channels

    @property
    def total_stride(self) -> int:
        return int(np.prod([b.temporal_stride for b in self.blocks]))

    def output_shapes(self, num_frames: int) -> List[Tuple[int, int]]:
        """(C_v, T_v) after every block, for an input of num_frames frames"""
        if num_frames % self.total_stride:
            raise ShapeError(f"T={num_frames} is not divisible by the total temporal stride {self.total_stride}")
        shapes, t = [], num_frames
        for spec in self.blocks:
            t //= spec.temporal_stride
            shapes.append((spec.out_channels, t))
        return shapes

    def depth_stages(self) -> List[Tuple[int, ...]]:
        """Shallow / middle / deep block groups used by tap selection"""
        if self.num_blocks == 10:
            return [(1, 2, 3), (4, 5, 6, 7), (8, 9, 10)]
        return [tuple(int(b) + 1 for b in part) for part in np.array_split(np.arange(self.num_blocks), 3)
                if len(part)]


@dataclass
class BlockParams:
    masks: List[Tensor]
    spatial: List[Tensor]
    temporal: Tensor
    shortcut_weight: Optional[Tensor] = None
    shortcut_bias: Optional[Tensor] = None


@dataclass
class BackboneParams:
    embed_weight: Tensor
    embed_bias: Tensor
    blocks: List[BlockParams] = field(default_factory=list)


@dataclass
class BlockOutputs:
    """Post-activation output of every block, addressed 1-based"""
    features: List[Tensor]

    def block(self, v: int) -> Tensor:
        if not 1 <= v <= len(self.features):
            raise ShapeError(f"block {v} outside [1, {len(self.features)}]")
        return self.features[v - 1]

    @property
    def last(self) -> Tensor:
        return self.features[-1]

    def __len__(self) -> int:
        return len(self.features)


def init_backbone_params(store: ParameterStore, schedule: BackboneSchedule,
                         adjacency: AdjacencyStack) -> BackboneParams:
    """
    Register every backbone tensor on the store.

    Biases that feed a channel norm are omitted since the norm removes them.
    Edge-importance masks start at one and are exempt from weight decay.
    """
    c0 = schedule.embed_channels
    params = BackboneParams(
        embed_weight=store.uniform("embed.weight", (c0, schedule.input_channels, 1), schedule.input_channels),
        embed_bias=store.zeros("embed.bias", (c0,)),
    )
    n = adjacency.num_joints
    for b, spec in enumerate(schedule.blocks, start=1):
        masks = [store.ones(f"block{b}.mask{k}", (n, n)) for k in range(adjacency.num_partitions)]
        spatial = [store.uniform(f"block{b}.spatial{k}", (spec.out_channels, spec.in_channels, 1), spec.in_channels)
                   for k in range(adjacency.num_partitions)]
        temporal = store.uniform(f"block{b}.temporal", (spec.out_channels, spec.out_channels, spec.kernel_size),
                                 spec.out_channels * spec.kernel_size)
        block = BlockParams(masks, spatial, temporal)
        if spec.needs_projection:
            block.shortcut_weight = store.uniform(f"block{b}.shortcut.weight",
                                                  (spec.out_channels, spec.in_channels, 1), spec.in_channels)
            block.shortcut_bias = store.zeros(f"block{b}.shortcut.bias", (spec.out_channels,))
        params.blocks.append(block)
    return params


def spatial_gcn(f_in: Tensor,
                adjacency: Union[AdjacencyStack, np.ndarray],
                masks: Sequence[Tensor],
                weights: Sequence[Tensor]) -> Tensor:
    """
    Σ_k W_k · (f_in · (A_k ⊙ M_k)).

    Joint mixing runs first, then a 1×1 channel mixing per partition.
    f_in is C_in×T×N or B×C_in×T×N; weights are C_out×C_in×1.
    """
    partitions = adjacency.partitions if isinstance(adjacency, AdjacencyStack) else np.asarray(adjacency)
    k_parts, n = partitions.shape[0], partitions.shape[-1]
    if f_in.shape[-1] != n:
        raise ShapeError(f"spatial_gcn: input has {f_in.shape[-1]} joints, adjacency has {n}")
    if len(masks) != k_parts or len(weights) != k_parts:
        raise ShapeError(f"spatial_gcn: {len(masks)} masks and {len(weights)} weights for {k_parts} partitions")

    out = None
    for k in range(k_parts):
        if masks[k].shape != (n, n):
            raise ShapeError(f"spatial_gcn: mask {k} is {shape_str(masks[k].shape)}, expected {n}×{n}")
        mixed = matmul(f_in, mul(Tensor(partitions[k]), masks[k]))
        term = conv_temporal(mixed, weights[k])
        out = term if out is None else add(out, term)
    return out


def block_forward(x: Tensor, spec: BlockSpec, adjacency: AdjacencyStack,
                  params: BlockParams, eps: float = 1e-5) -> Tensor:
    if x.shape[-3] != spec.in_channels:
        raise ShapeError(f"block: input has {x.shape[-3]} channels, block expects {spec.in_channels}")
    if spec.temporal_stride > 1 and x.shape[-2] % spec.temporal_stride:
        raise ShapeError(f"block: T={x.shape[-2]} is not divisible by stride {spec.temporal_stride}")

    h = relu(channel_norm(spatial_gcn(x, adjacency, params.masks, params.spatial), eps))
    h = conv_temporal(h, params.temporal, None, spec.temporal_stride, (spec.kernel_size - 1) // 2)
    h = channel_norm(h, eps)
    if spec.residual:
        if spec.needs_projection:
            shortcut = conv_temporal(x, params.shortcut_weight, params.shortcut_bias, spec.temporal_stride, 0)
        else:
            shortcut = x
        h = add(h, shortcut)
    return relu(h)


def backbone_forward(x: Tensor, schedule: BackboneSchedule, adjacency: AdjacencyStack,
                     params: BackboneParams, eps: float = 1e-5) -> BlockOutputs:
    """
    Normalize the raw clip per channel, lift it to the first block width with
    a 1×1 embedding, then run every block and keep each block's output.
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"backbone: expected C×T×N or B×C×T×N input, got {shape_str(x.shape)}")
    if x.shape[-3] != schedule.input_channels:
        raise ShapeError(f"backbone: input has {x.shape[-3]} channels, expected {schedule.input_channels}")
    if x.shape[-1] != adjacency.num_joints:
        raise ShapeError(f"backbone: input has {x.shape[-1]} joints, graph has {adjacency.num_joints}")
    if x.shape[-2] % schedule.total_stride:
        raise ShapeError(f"backbone: T={x.shape[-2]} is not divisible by the total stride {schedule.total_stride}")

    h = conv_temporal(channel_norm(x, eps), params.embed_weight, params.embed_bias)
    features = []
    for spec, block in zip(schedule.blocks, params.blocks):
        h = block_forward(h, spec, adjacency, block, eps)
        features.append(h)
    return BlockOutputs(features)
