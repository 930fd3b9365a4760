# core/__init__.py
"""
Skeleton action recognition with a cross-block semantic cascade - core components
"""

__version__ = "1.0.0"

from .errors import CFSCError, ConfigError, ShapeError, NumericError, TapeError
from .tensor_autograd import Tensor, Tape, grad_check
from .skeleton_graph import SkeletonGraph, AdjacencyStack, Topology, PartitionStrategy, build_graph, build_adjacency
from .gcn_backbone import BackboneSchedule, BlockSpec, backbone_forward
from .cfsc import TapSet, plan_cascade, cascade_forward, fuse_final, classify
from .config import ModelConfig, OptimConfig, ExperimentConfig, Settings, config_hash, preset
from .model import SkeletonActionModel
from .data_pipeline import SkeletonClip, DatasetManifest, SkeletonDataset, load_clip, write_clip, load_manifest, batch_iter
from .synthetic_fencing import SynthConfig, synth_dataset
from .training import lr_schedule, sgd_step, train, evaluate, TrainReport
from .analysis import AblateGrid, run_ablation, joint_response, ResponseProfile

__all__ = [
    'CFSCError',
    'ConfigError',
    'ShapeError',
    'NumericError',
    'TapeError',
    'Tensor',
    'Tape',
    'grad_check',
    'SkeletonGraph',
    'AdjacencyStack',
    'Topology',
    'PartitionStrategy',
    'build_graph',
    'build_adjacency',
    'BackboneSchedule',
    'BlockSpec',
    'backbone_forward',
    'TapSet',
    'plan_cascade',
    'cascade_forward',
    'fuse_final',
    'classify',
    'ModelConfig',
    'OptimConfig',
    'ExperimentConfig',
    'Settings',
    'config_hash',
    'preset',
    'SkeletonActionModel',
    'SkeletonClip',
    'DatasetManifest',
    'SkeletonDataset',
    'load_clip',
    'write_clip',
    'load_manifest',
    'batch_iter',
    'SynthConfig',
    'synth_dataset',
    'lr_schedule',
    'sgd_step',
    'train',
    'evaluate',
    'TrainReport',
    'AblateGrid',
    'run_ablation',
    'joint_response',
    'ResponseProfile',
]
