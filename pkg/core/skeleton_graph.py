# core/skeleton_graph.py
"""
Human-skeleton spatial graphs and the partitioned normalized adjacency stack
consumed by the spatial graph convolution.

Built-in wirings follow the 18- and 25-keypoint pose-estimator output layouts.
Neighbor distance is one hop; self connections are added during normalization.
"""

import json
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .errors import ConfigError, ShapeError


class Topology(Enum):
    BODY18 = "body18"
    BODY25 = "body25"
    CHAIN = "chain"
    CUSTOM = "custom"


class PartitionStrategy(Enum):
    UNIFORM = "uniform"
    SPATIAL_CONFIG = "spatial_config"


# 18-keypoint layout
#  0 nose        1 neck         2 r-shoulder   3 r-elbow    4 r-wrist
#  5 l-shoulder  6 l-elbow      7 l-wrist      8 r-hip      9 r-knee
# 10 r-ankle    11 l-hip       12 l-knee      13 l-ankle   14 r-eye
# 15 l-eye      16 r-ear       17 l-ear
BODY18_JOINTS = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)
BODY18_EDGES = (
    (4, 3), (3, 2), (7, 6), (6, 5), (13, 12), (12, 11), (10, 9), (9, 8), (11, 5),
    (8, 2), (5, 1), (2, 1), (0, 1), (15, 0), (14, 0), (17, 15), (16, 14),
)
BODY18_CENTER = 1

# 25-keypoint layout: the 18-keypoint body with a mid-hip root plus feet
#  0 nose       1 neck        2 r-shoulder  3 r-elbow   4 r-wrist    5 l-shoulder
#  6 l-elbow    7 l-wrist     8 mid-hip     9 r-hip    10 r-knee    11 r-ankle
# 12 l-hip     13 l-knee     14 l-ankle    15 r-eye    16 l-eye     17 r-ear
# 18 l-ear     19 l-big-toe  20 l-small-toe 21 l-heel  22 r-big-toe 23 r-small-toe
# 24 r-heel
BODY25_JOINTS = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "mid_hip", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye",
    "r_ear", "l_ear", "l_big_toe", "l_small_toe", "l_heel", "r_big_toe", "r_small_toe", "r_heel",
)
BODY25_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
    (10, 11), (8, 12), (12, 13), (13, 14), (0, 15), (15, 17), (0, 16), (16, 18),
    (14, 19), (19, 20), (14, 21), (11, 22), (22, 23), (11, 24),
)
BODY25_CENTER = 8

# Joints read out by the feature-response analysis
CRITICAL_JOINTS: Dict[str, Dict[str, int]] = {
    "body18": {"left_foot": 13, "right_foot": 10, "left_hand": 7, "right_hand": 4},
    "body25": {"left_foot": 14, "right_foot": 11, "left_hand": 7, "right_hand": 4},
}


@dataclass(frozen=True)
class SkeletonGraph:
    num_joints: int
    edges: Tuple[Tuple[int, int], ...]
    center: int
    name: str
    joint_names: Tuple[str, ...] = ()

    def validate(self) -> Tuple[bool, List[str]]:
        """Check joint count, edge endpoints, self-loops, center and connectivity"""
        issues = []
        if self.num_joints < 2:
            issues.append(f"num_joints must be at least 2, got {self.num_joints}")
            return False, issues
        for i, j in self.edges:
            if not (0 <= i < self.num_joints and 0 <= j < self.num_joints):
                issues.append(f"edge ({i}, {j}) has an endpoint outside [0, {self.num_joints})")
            elif i == j:
                issues.append(f"edge ({i}, {j}) is a self-loop")
        if not 0 <= self.center < self.num_joints:
            issues.append(f"center {self.center} outside [0, {self.num_joints})")
        if self.joint_names and len(self.joint_names) != self.num_joints:
            issues.append(f"{len(self.joint_names)} joint names for {self.num_joints} joints")
        if not issues:
            n_components, _ = connected_components(self._edge_matrix(), directed=False)
            if n_components != 1:
                issues.append(f"graph '{self.name}' is disconnected ({n_components} components)")
        return not issues, issues

    def _edge_matrix(self) -> csr_matrix:
        rows = [i for i, j in self.edges] + [j for i, j in self.edges]
        cols = [j for i, j in self.edges] + [i for i, j in self.edges]
        return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.num_joints, self.num_joints))

    def neighbor_matrix(self) -> np.ndarray:
        """Binary symmetric adjacency without self connections"""
        return (self._edge_matrix().toarray() > 0).astype(np.float64)

    @cached_property
    def hop_to_center(self) -> np.ndarray:
        return shortest_path(self._edge_matrix(), unweighted=True, directed=False, indices=self.center)

    @cached_property
    def parents(self) -> np.ndarray:
        """Parent of each joint on the shortest path toward the center; the center is its own parent"""
        hops = self.hop_to_center
        neighbors = self.neighbor_matrix()
        parents = np.arange(self.num_joints)
        for j in range(self.num_joints):
            if j == self.center:
                continue
            closer = [i for i in np.flatnonzero(neighbors[j]) if hops[i] < hops[j]]
            parents[j] = min(closer)
        return parents

    def joint_label(self, j: int) -> str:
        return self.joint_names[j] if self.joint_names else f"joint_{j}"


@dataclass(frozen=True, eq=False)
class AdjacencyStack:
    partitions: np.ndarray  # K_v×N×N
    strategy: PartitionStrategy

    @property
    def num_partitions(self) -> int:
        return int(self.partitions.shape[0])

    @property
    def num_joints(self) -> int:
        return int(self.partitions.shape[1])

    def support(self) -> np.ndarray:
        return self.partitions.sum(axis=0) > 0


def _chain_graph(num_joints: int) -> SkeletonGraph:
    edges = tuple((i, i + 1) for i in range(num_joints - 1))
    return SkeletonGraph(num_joints, edges, 0, f"chain{num_joints}")


def build_graph(topology: Union[Topology, str],
                num_joints: Optional[int] = None,
                edges: Optional[Sequence[Sequence[int]]] = None,
                center: Optional[int] = None) -> SkeletonGraph:
    """Create a validated skeleton graph for a built-in or custom topology"""
    topology = Topology(topology)
    if topology is Topology.BODY18:
        graph = SkeletonGraph(18, BODY18_EDGES, BODY18_CENTER, "body18", BODY18_JOINTS)
    elif topology is Topology.BODY25:
        graph = SkeletonGraph(25, BODY25_EDGES, BODY25_CENTER, "body25", BODY25_JOINTS)
    elif topology is Topology.CHAIN:
        if num_joints is None or num_joints < 2:
            raise ConfigError(f"chain topology needs num_joints >= 2, got {num_joints}")
        graph = _chain_graph(num_joints)
    else:
        if num_joints is None or edges is None or center is None:
            raise ConfigError("custom topology needs num_joints, edges and center")
        graph = SkeletonGraph(int(num_joints), tuple((int(i), int(j)) for i, j in edges),
                              int(center), "custom")

    ok, issues = graph.validate()
    if not ok:
        raise ConfigError("; ".join(issues))
    return graph


def load_topology(path: Union[str, Path]) -> SkeletonGraph:
    """Load a custom topology document {"num_joints", "edges", "center"}"""
    path = Path(path)
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read topology {path}: {e}")
    missing = {"num_joints", "edges", "center"} - set(doc)
    if missing:
        raise ConfigError(f"topology {path} missing fields: {sorted(missing)}")
    graph = build_graph(Topology.CUSTOM, doc["num_joints"], doc["edges"], doc["center"])
    names = tuple(doc.get("joint_names", ()))
    if names and len(names) != graph.num_joints:
        raise ConfigError(f"topology {path} lists {len(names)} joint names for {graph.num_joints} joints")
    return replace(graph, joint_names=names)


def symmetric_normalize(raw: np.ndarray, degrees: Optional[np.ndarray] = None) -> np.ndarray:
    """Λ^{-1/2} raw Λ^{-1/2}; Λ defaults to the row sums of raw and zero-degree rows stay zero"""
    degrees = raw.sum(axis=1) if degrees is None else np.asarray(degrees, dtype=np.float64)
    inv_sqrt = np.zeros_like(degrees)
    nonzero = degrees > 0
    inv_sqrt[nonzero] = 1.0 / np.sqrt(degrees[nonzero])
    return inv_sqrt[:, None] * raw * inv_sqrt[None, :]


def build_adjacency(graph: SkeletonGraph,
                    strategy: Union[PartitionStrategy, str] = PartitionStrategy.SPATIAL_CONFIG) -> AdjacencyStack:
    """
    Partition each joint's one-hop neighborhood and normalize each partition.

    uniform: one partition, the self-looped adjacency.
    spatial_config: self / centripetal / centrifugal, by hop distance to the
    center; neighbors at equal distance go to the centripetal partition.

    Every partition is scaled by the degrees of the full self-looped
    adjacency, so the partitions sum to the uniform matrix and no edge
    into the center is lost.

    Only the self and uniform partitions are symmetric. The centripetal and
    centrifugal partitions are not: each is the transpose of the other, up to
    the equal-distance edges that sit in the centripetal one.
    """
    strategy = PartitionStrategy(strategy)
    n = graph.num_joints
    neighbors = graph.neighbor_matrix()
    identity = np.eye(n)
    degrees = (identity + neighbors).sum(axis=1)

    if strategy is PartitionStrategy.UNIFORM:
        raw = [identity + neighbors]
    else:
        hops = graph.hop_to_center
        closer_or_level = (hops[None, :] <= hops[:, None]).astype(np.float64)
        centripetal = neighbors * closer_or_level
        centrifugal = neighbors - centripetal
        raw = [identity, centripetal, centrifugal]

    partitions = np.stack([symmetric_normalize(r, degrees) for r in raw])
    return AdjacencyStack(partitions, strategy)


def permute_graph(graph: SkeletonGraph, adjacency: AdjacencyStack, perm: Sequence[int]) -> AdjacencyStack:
    """Relabel joints: new joint j is old joint perm[j], i.e. Pᵀ A_k P for every partition"""
    perm = np.asarray(perm, dtype=np.int64)
    n = adjacency.num_joints
    if graph.num_joints != n:
        raise ShapeError(f"graph has {graph.num_joints} joints, adjacency has {n}")
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ConfigError(f"permutation {perm.tolist()} is not a bijection on [0, {n})")
    permuted = adjacency.partitions[:, perm, :][:, :, perm]
    return AdjacencyStack(permuted, adjacency.strategy)
