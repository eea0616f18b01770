"""Synthetic attributed graphs, non-IID node partitioning and per-worker subgraphs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "GlobalGraph",
    "PartitionSpec",
    "Subgraph",
    "generate_sbm",
    "dirichlet_partition",
    "build_subgraphs",
    "split_masks_per_worker",
    "label_skew",
    "load_graph",
]


@dataclass(frozen=True, eq=False)
class GlobalGraph:
    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, u < v, lexicographically sorted, unique
    features: np.ndarray  # (num_nodes, d0)
    labels: np.ndarray  # (num_nodes,)
    num_classes: int
    train_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self) -> None:
        n = self.num_nodes
        if n <= 0:
            raise ConfigurationError("graph must have at least one node")
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2:
            raise ConfigurationError("edges must be an (E, 2) array")
        if len(e):
            if np.any(e[:, 0] >= e[:, 1]):
                raise ConfigurationError("edges must be stored as (u, v) with u < v (no self-loops)")
            if e.min() < 0 or e.max() >= n:
                raise ConfigurationError("edge endpoint out of range")
            if len(np.unique(e[:, 0] * n + e[:, 1])) != len(e):
                raise ConfigurationError("duplicate edges")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ConfigurationError("features must be (num_nodes, d0)")
        if self.labels.shape != (n,):
            raise ConfigurationError("exactly one label per node required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError("label outside [0, num_classes)")
        if np.any(self.train_mask & self.test_mask):
            raise ConfigurationError("train and test masks overlap")

    @property
    def d0(self) -> int:
        return int(self.features.shape[1])

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        """Sorted neighbor ids for every node."""
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges.tolist():
            adj[u].append(v)
            adj[v].append(u)
        return [np.array(sorted(a), dtype=np.int64) for a in adj]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)


def _canonical_edges(pairs: np.ndarray | Sequence[tuple[int, int]]) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    if len(arr) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


def _uniform_test_mask(n: int, test_fraction: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    n_test = int(round(test_fraction * n))
    mask[rng.permutation(n)[:n_test]] = True
    return mask


def generate_sbm(
    num_nodes: int,
    num_classes: int,
    p_intra: float,
    p_inter: float,
    d0: int,
    seed: int,
    feature_margin: float = 1.0,
    test_fraction: float = 0.2,
) -> GlobalGraph:
    """Stochastic block model with class-conditional Gaussian node features.

    Nodes are split into contiguous, near-equal blocks (label = block id). Each
    feature vector is ``feature_margin * mean_c + N(0, I)`` where ``mean_c`` is
    the unit vector ``e_c`` when ``d0 >= num_classes`` and a random unit
    direction otherwise.
    """
    if num_nodes <= 0:
        raise ConfigurationError("num_nodes must be positive")
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if d0 < 1:
        raise ConfigurationError("d0 must be >= 1")
    if not (0.0 <= p_inter <= p_intra <= 1.0):
        raise ConfigurationError(f"need 0 <= p_inter <= p_intra <= 1, got {p_inter}, {p_intra}")
    if not (0.0 <= test_fraction < 1.0):
        raise ConfigurationError("test_fraction must be in [0, 1)")

    rng = np.random.default_rng(seed)
    labels = (np.arange(num_nodes) * num_classes) // num_nodes

    iu, ju = np.triu_indices(num_nodes, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_intra, p_inter)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1).astype(np.int64)

    if d0 >= num_classes:
        means = np.eye(num_classes, d0)
    else:
        dirs = rng.standard_normal((num_classes, d0))
        means = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    features = feature_margin * means[labels] + rng.standard_normal((num_nodes, d0))

    test_mask = _uniform_test_mask(num_nodes, test_fraction, rng)
    return GlobalGraph(
        num_nodes=num_nodes,
        edges=edges,
        features=features,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        train_mask=~test_mask,
        test_mask=test_mask,
    )


@dataclass(frozen=True)
class PartitionSpec:
    num_workers: int
    alpha: float
    seed: int = 0
    min_size: int = 0  # redraw until every worker owns at least this many nodes

    def __post_init__(self) -> None:
        if self.num_workers < 1:
            raise ConfigurationError("num_workers must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("Dirichlet alpha must be positive")
        if self.min_size < 0:
            raise ConfigurationError("min_size must be >= 0")


def dirichlet_partition(graph: GlobalGraph, spec: PartitionSpec, max_attempts: int = 1000) -> np.ndarray:
    """Assign every node to one worker, class by class, with Dir(alpha) proportions.

    Returns an ``(num_nodes,)`` owner array.
    """
    m = spec.num_workers
    if spec.min_size * m > graph.num_nodes:
        raise ConfigurationError("min_size too large for the number of nodes")
    rng = np.random.default_rng(spec.seed)
    owner = np.zeros(graph.num_nodes, dtype=np.int64)
    if m == 1:
        return owner
    for _ in range(max_attempts):
        for c in range(graph.num_classes):
            idx = np.flatnonzero(graph.labels == c)
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(m, spec.alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for w, part in enumerate(np.split(idx, cuts)):
                owner[part] = w
        if np.bincount(owner, minlength=m).min() >= spec.min_size:
            return owner
    raise ConfigurationError(
        f"could not satisfy min_size={spec.min_size} after {max_attempts} Dirichlet draws"
    )


def split_masks_per_worker(
    graph: GlobalGraph, owner: np.ndarray, test_fraction: float, seed: int
) -> GlobalGraph:
    """Return a copy of ``graph`` whose test mask holds ``round(frac * |V_i|)`` nodes of each worker."""
    rng = np.random.default_rng(seed)
    test = np.zeros(graph.num_nodes, dtype=bool)
    for w in range(int(owner.max()) + 1):
        nodes = np.flatnonzero(owner == w)
        k = int(round(test_fraction * len(nodes)))
        test[nodes[rng.permutation(len(nodes))[:k]]] = True
    return replace(graph, train_mask=~test, test_mask=test)


@dataclass(frozen=True, eq=False)
class Subgraph:
    worker_id: int
    local_nodes: np.ndarray  # sorted global ids
    internal_edges: np.ndarray  # (k, 2), both endpoints local, u < v
    external_stubs: np.ndarray  # (s, 3): local node, remote node, remote worker
    train_nodes: np.ndarray
    test_nodes: np.ndarray
    _local_set: frozenset = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_local_set", frozenset(self.local_nodes.tolist()))
        if len(self.external_stubs) and np.any(self.external_stubs[:, 2] == self.worker_id):
            raise ConfigurationError("external stub points back to its own worker")

    def owns(self, node: int) -> bool:
        return node in self._local_set

    @cached_property
    def local_neighbors(self) -> dict[int, np.ndarray]:
        adj: dict[int, list[int]] = {int(v): [] for v in self.local_nodes}
        for u, v in self.internal_edges.tolist():
            adj[u].append(v)
            adj[v].append(u)
        return {v: np.array(sorted(a), dtype=np.int64) for v, a in adj.items()}

    @cached_property
    def remote_neighbors(self) -> dict[int, list[tuple[int, int]]]:
        """local node -> sorted list of (remote node, owning worker)."""
        adj: dict[int, list[tuple[int, int]]] = {int(v): [] for v in self.local_nodes}
        for u, r, w in self.external_stubs.tolist():
            adj[u].append((r, w))
        return {v: sorted(a) for v, a in adj.items()}

    @cached_property
    def boundary(self) -> dict[int, np.ndarray]:
        """remote worker -> sorted distinct remote nodes adjacent to this subgraph."""
        out: dict[int, set[int]] = {}
        for _, r, w in self.external_stubs.tolist():
            out.setdefault(w, set()).add(r)
        return {w: np.array(sorted(s), dtype=np.int64) for w, s in sorted(out.items())}


def build_subgraphs(graph: GlobalGraph, owner: np.ndarray) -> list[Subgraph]:
    owner = np.asarray(owner, dtype=np.int64)
    if owner.shape != (graph.num_nodes,):
        raise ConfigurationError("owner map must cover every node")
    m = int(owner.max()) + 1 if len(owner) else 0
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    ou, ov = owner[u], owner[v]
    internal = ou == ov
    cross = ~internal

    subgraphs = []
    for w in range(m):
        local = np.flatnonzero(owner == w)
        int_edges = graph.edges[internal & (ou == w)]
        stubs_a = np.stack([u[cross & (ou == w)], v[cross & (ou == w)], ov[cross & (ou == w)]], axis=1)
        stubs_b = np.stack([v[cross & (ov == w)], u[cross & (ov == w)], ou[cross & (ov == w)]], axis=1)
        stubs = np.concatenate([stubs_a, stubs_b]).reshape(-1, 3)
        if len(stubs):
            stubs = stubs[np.lexsort((stubs[:, 1], stubs[:, 0]))]
        subgraphs.append(
            Subgraph(
                worker_id=w,
                local_nodes=local,
                internal_edges=int_edges,
                external_stubs=stubs.astype(np.int64),
                train_nodes=local[graph.train_mask[local]],
                test_nodes=local[graph.test_mask[local]],
            )
        )
    return subgraphs


def label_skew(subgraphs: Sequence[Subgraph], graph: GlobalGraph) -> tuple[np.ndarray, float]:
    """Total-variation distance of each worker's label histogram to the global one.

    Workers that own no nodes get NaN and are left out of the mean.
    """
    c = graph.num_classes
    glob = np.bincount(graph.labels, minlength=c) / graph.num_nodes
    tv = np.full(len(subgraphs), np.nan)
    for k, sg in enumerate(subgraphs):
        if len(sg.local_nodes) == 0:
            continue
        local = np.bincount(graph.labels[sg.local_nodes], minlength=c) / len(sg.local_nodes)
        tv[k] = 0.5 * np.abs(local - glob).sum()
    mean = float(np.nanmean(tv)) if np.any(~np.isnan(tv)) else float("nan")
    return tv, mean


def load_graph(
    edge_path: str | Path,
    table_path: str | Path,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> GlobalGraph:
    """Read a small real graph.

    ``edge_path`` holds one whitespace-separated ``u v`` pair per line (``#``
    comments allowed). ``table_path`` is a CSV with header
    ``node_id,label,f0,...,f{d0-1}``. Node ids are remapped to ``0..n-1`` in
    ascending ``node_id`` order.
    """
    with open(table_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["node_id", "label"] or any(
            h != f"f{i}" for i, h in enumerate(header[2:])
        ):
            raise ConfigurationError("table header must be node_id,label,f0..f{d0-1}")
        rows = [r for r in reader if r]
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ConfigurationError("duplicate node_id in feature table")
    order = np.argsort(ids)
    remap = {int(ids[i]): k for k, i in enumerate(order)}
    labels = np.array([int(rows[i][1]) for i in order], dtype=np.int64)
    features = np.array([[float(x) for x in rows[i][2:]] for i in order], dtype=np.float64)
    features = features.reshape(len(rows), len(header) - 2)

    pairs = []
    with open(edge_path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            a, b = line.split()[:2]
            try:
                pairs.append((remap[int(a)], remap[int(b)]))
            except KeyError as exc:
                raise ConfigurationError(f"edge references unknown node {exc}") from None

    n = len(rows)
    test_mask = _uniform_test_mask(n, test_fraction, np.random.default_rng(seed))
    return GlobalGraph(
        num_nodes=n,
        edges=_canonical_edges(pairs),
        features=features,
        labels=labels,
        num_classes=int(labels.max()) + 1 if n else 0,
        train_mask=~test_mask,
        test_mask=test_mask,
    )
