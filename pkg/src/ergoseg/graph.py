"""Skeleton topology, normalized adjacency and root-distance partitions.

Topology file grammar (one directive per line, ``#`` starts a comment)::

    joint <name> [root]      # joints in index order; exactly one root
    edge <name> <name>       # undirected bone

"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

CANONICAL_JOINTS = (
    "pelvis", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

CANONICAL_EDGES = (
    ("pelvis", "neck"), ("neck", "head"),
    ("neck", "l_shoulder"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("neck", "r_shoulder"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("pelvis", "l_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("pelvis", "r_hip"), ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    joints: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    root: int = 0
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.joints)
        if n == 0:
            raise TopologyError("topology needs at least one joint")
        if not 0 <= self.root < n:
            raise TopologyError(f"root index {self.root} out of range for {n} joints")
        if len(set(self.joints)) != n:
            raise TopologyError("duplicate joint names")
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise TopologyError(f"bad edge ({i}, {j})")
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(self.joints)})
        if len(self.edges) != n - 1 or np.isinf(self.hops).any():
            raise TopologyError("edges must form a connected tree over all joints")

    @classmethod
    def from_names(cls, joints, edges, root: str | int = 0) -> SkeletonTopology:
        joints = tuple(joints)
        index = {name: i for i, name in enumerate(joints)}
        try:
            pairs = tuple((index[a], index[b]) for a, b in edges)
            root_idx = root if isinstance(root, int) else index[root]
        except KeyError as exc:
            raise TopologyError(f"unknown joint {exc.args[0]!r}") from None
        return cls(joints, pairs, root_idx)

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def index(self, name: str) -> int:
        return self._index[name]

    @cached_property
    def hops(self) -> np.ndarray:
        """Breadth-first hop distance of every joint from the root (inf if unreachable)."""
        n = self.num_joints
        nbrs: list[list[int]] = [[] for _ in range(n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        dist = np.full(n, np.inf)
        dist[self.root] = 0
        queue = deque([self.root])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if np.isinf(dist[v]):
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def to_text(self) -> str:
        lines = [f"joint {name}" + (" root" if i == self.root else "")
                 for i, name in enumerate(self.joints)]
        lines += [f"edge {self.joints[i]} {self.joints[j]}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def canonical_topology() -> SkeletonTopology:
    return SkeletonTopology.from_names(CANONICAL_JOINTS, CANONICAL_EDGES, "pelvis")


def parse_topology(text: str) -> SkeletonTopology:
    joints, edges, root = [], [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "joint" and len(parts) in (2, 3):
            if len(parts) == 3:
                if parts[2] != "root" or root is not None:
                    raise TopologyError(f"line {lineno}: bad root marker")
                root = parts[1]
            joints.append(parts[1])
        elif parts[0] == "edge" and len(parts) == 3:
            edges.append((parts[1], parts[2]))
        else:
            raise TopologyError(f"line {lineno}: cannot parse {raw!r}")
    if root is None:
        raise TopologyError("no joint marked as root")
    return SkeletonTopology.from_names(joints, edges, root)


def load_topology(path: str | Path) -> SkeletonTopology:
    return parse_topology(Path(path).read_text())


def _check_binary_symmetric(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if not np.isin(a, (0.0, 1.0)).all():
        raise ValueError("adjacency must be binary")
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency must have a zero diagonal")


def degree_normalize(a: np.ndarray) -> np.ndarray:
    """``D^{-1/2} a D^{-1/2}`` with ``D`` the row sums of ``a``; zero-degree rows stay zero."""
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = deg[nz] ** -0.5
    return inv[:, None] * a * inv[None, :]


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric normalization of ``a + I`` by its degree matrix."""
    a = np.asarray(a, dtype=np.float64)
    _check_binary_symmetric(a)
    return degree_normalize(a + np.eye(len(a)))


def partition_adjacency(topology: SkeletonTopology) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``A + I`` into self, toward-root and away-from-root parts.

    Row i aggregates over neighbours j: entry (i, j) lands in the toward-root
    part when j is closer to the root than i, otherwise in the away part.
    """
    n = topology.num_joints
    hops = topology.hops
    self_part = np.eye(n)
    toward = np.zeros((n, n))
    away = np.zeros((n, n))
    for i, j in topology.edges:
        for u, v in ((i, j), (j, i)):
            if hops[v] < hops[u]:
                toward[u, v] = 1.0
            else:
                away[u, v] = 1.0
    return self_part, toward, away


@dataclass(frozen=True)
class AdjacencySet:
    adjacency: np.ndarray
    adjacency_hat: np.ndarray
    degree_hat: np.ndarray
    partitions: tuple[np.ndarray, np.ndarray, np.ndarray]
    normalized: tuple[np.ndarray, np.ndarray, np.ndarray]

    @classmethod
    def from_topology(cls, topology: SkeletonTopology) -> AdjacencySet:
        a = topology.adjacency()
        a_hat = a + np.eye(len(a))
        parts = partition_adjacency(topology)
        return cls(
            adjacency=a,
            adjacency_hat=a_hat,
            degree_hat=np.diag(a_hat.sum(axis=1)),
            partitions=parts,
            normalized=tuple(degree_normalize(p) for p in parts),
        )

    @property
    def num_joints(self) -> int:
        return len(self.adjacency)
