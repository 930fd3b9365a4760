# core/model.py
"""
SkeletonActionModel: backbone, optional cascade branch and classifier wired
from a ModelConfig, with checkpoint save/load.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .cfsc import (CascadeParams, CascadeResult, LevelTC, TapSet, cascade_forward, classify, fuse_final,
                   init_cascade_params, plan_cascade)
from .config import ModelConfig, OptimConfig, config_hash
from .errors import ConfigError, ShapeError, shape_str
from .gcn_backbone import BackboneSchedule, BlockOutputs, backbone_forward, init_backbone_params
from .parameter_store import ParameterStore, read_checkpoint
from .skeleton_graph import (AdjacencyStack, SkeletonGraph, Topology, build_adjacency, build_graph,
                             load_topology)
from .tensor_autograd import Tensor, as_tensor


@dataclass
class ModelOutput:
    logits: Tensor
    blocks: BlockOutputs
    fused: Tensor
    cascade: Optional[CascadeResult] = None


def graph_from_config(config: ModelConfig) -> SkeletonGraph:
    if config.topology == Topology.CUSTOM.value:
        return load_topology(config.topology_path)
    return build_graph(config.topology, num_joints=config.num_joints)


def aligned_length(target_t: int, multiple: int) -> int:
    """Smallest multiple of `multiple` that is >= target_t (150 → 152 for a stride product of 4)"""
    return -(-int(target_t) // multiple) * multiple


class SkeletonActionModel:
    """
    Parameters are created in a fixed order: backbone, classifier, then the
    cascade. A cascade-free model built from the same seed therefore shares
    every backbone and classifier value with its cascade counterpart.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, graph: Optional[SkeletonGraph] = None):
        config = config.resolved()
        ok, issues = config.validate()
        if not ok:
            raise ConfigError("; ".join(issues))
        self.config = config
        self.seed = int(seed)
        self.graph = graph or graph_from_config(config)
        self.adjacency: AdjacencyStack = build_adjacency(self.graph, config.partition)
        self.schedule = BackboneSchedule.from_channels(config.channels, config.stride_blocks,
                                                       config.block_kernel, config.in_channels)
        self.num_frames = aligned_length(config.target_t, self.schedule.total_stride)

        self.store = ParameterStore(self.seed)
        self.backbone = init_backbone_params(self.store, self.schedule, self.adjacency)
        c_last = self.schedule.blocks[-1].out_channels
        self.classifier_weight = self.store.uniform("classifier.weight", (config.num_classes, c_last), c_last)
        self.classifier_bias = self.store.zeros("classifier.bias", (config.num_classes,))

        self.taps: Optional[TapSet] = TapSet(tuple(config.taps)) if config.use_cascade else None
        self._plans: Dict[int, List[LevelTC]] = {}
        self.cascade = CascadeParams()
        self.lambda_param: Optional[Tensor] = None
        self.tap_warnings: List[str] = []
        if self.taps is not None:
            self.tap_warnings = self.taps.selection_warnings(self.schedule)
            self.cascade = init_cascade_params(self.store, self.plan_for(self.num_frames))
            if config.learn_lambda:
                self.lambda_param = self.store.constant("cascade.lambda", (), config.lambda_internal)

    @property
    def use_cascade(self) -> bool:
        return self.taps is not None

    @property
    def lambda_internal(self) -> Union[float, Tensor]:
        return self.lambda_param if self.lambda_param is not None else self.config.lambda_internal

    @property
    def lambda_fusion(self) -> Union[float, Tensor]:
        return self.lambda_param if self.lambda_param is not None else self.config.lambda_fusion

    def plan_for(self, num_frames: int) -> List[LevelTC]:
        """Cascade plan for a clip length; level weights do not depend on it"""
        if num_frames not in self._plans:
            self._plans[num_frames] = plan_cascade(self.schedule, self.taps, self.config.kernel_size, num_frames)
        return self._plans[num_frames]

    def forward(self, x, use_cascade: Optional[bool] = None) -> ModelOutput:
        """x is C×T×N or B×C×T×N; logits are K or B×K accordingly"""
        x = as_tensor(x)
        if x.ndim not in (3, 4):
            raise ShapeError(f"model input must be C×T×N or B×C×T×N, got {shape_str(x.shape)}")
        run_cascade = self.use_cascade if use_cascade is None else use_cascade and self.use_cascade
        eps = self.config.eps

        blocks = backbone_forward(x, self.schedule, self.adjacency, self.backbone, eps)
        fused, result = blocks.last, None
        if run_cascade:
            plan = self.plan_for(x.shape[-2])
            result = cascade_forward(blocks, plan, self.cascade, self.lambda_internal, eps)
            fused = fuse_final(blocks.last, result.f_dis, self.lambda_fusion)
        logits = classify(fused, self.classifier_weight, self.classifier_bias, self.config.num_classes)
        return ModelOutput(logits, blocks, fused, result)

    __call__ = forward

    # -----------------------------------------------------------------------
    # Persistence
    # -----------------------------------------------------------------------

    def save(self, path: Union[str, Path], optim: Optional[OptimConfig] = None,
             extra: Optional[Dict[str, Any]] = None) -> Path:
        meta = {"config_hash": config_hash(self.config, optim),
                "model_config": self.config.to_dict(),
                "optim_config": optim.to_dict() if optim else None}
        meta.update(extra or {})
        return self.store.save_checkpoint(path, meta)

    @classmethod
    def load(cls, path: Union[str, Path], graph: Optional[SkeletonGraph] = None) -> "SkeletonActionModel":
        manifest, arrays = read_checkpoint(path)
        if "model_config" not in manifest:
            raise ConfigError(f"checkpoint {path} carries no model configuration")
        model = cls(ModelConfig.from_dict(manifest["model_config"]), manifest.get("seed", 0), graph)
        model.store.load_arrays(arrays)
        return model
