"""Worker topologies, constant-weight mixing, model aggregation and consensus distances."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .gcnmodel import ModelParams

_EIG_SNAP = 1e-9


class Topology:
    """Undirected worker graph given by a symmetric 0/1 adjacency with zero diagonal."""

    def __init__(self, adjacency: np.ndarray, require_connected: bool = False):
        a = np.asarray(adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigurationError("adjacency must be square")
        if not np.isin(a, (0, 1)).all():
            raise ConfigurationError("adjacency entries must be 0 or 1")
        a = a.astype(np.int8)
        if not np.array_equal(a, a.T):
            raise ConfigurationError("adjacency must be symmetric")
        if np.any(np.diag(a)):
            raise ConfigurationError("adjacency diagonal must be zero")
        self.adj = a
        self.adj.setflags(write=False)
        if require_connected and not self.is_connected():
            raise ConfigurationError("topology is not connected")

    @property
    def m(self) -> int:
        return self.adj.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adj[i])

    def degree(self, i: int | None = None):
        deg = self.adj.sum(axis=1).astype(np.int64)
        return deg if i is None else int(deg[i])

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.adj[i, j])

    def edges(self) -> list[tuple[int, int]]:
        iu, ju = np.nonzero(np.triu(self.adj, k=1))
        return list(zip(iu.tolist(), ju.tolist()))

    @property
    def num_edges(self) -> int:
        return int(self.adj.sum()) // 2

    def is_connected(self) -> bool:
        if self.m <= 1:
            return True
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in self.neighbors(i).tolist():
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.m

    def laplacian(self) -> np.ndarray:
        return np.diag(self.adj.sum(axis=1)).astype(np.float64) - self.adj

    def without_edge(self, i: int, j: int) -> "Topology":
        a = self.adj.copy()
        a[i, j] = a[j, i] = 0
        return Topology(a)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Topology) and np.array_equal(self.adj, other.adj)

    def __repr__(self) -> str:
        return f"Topology(m={self.m}, edges={self.num_edges})"

    @classmethod
    def from_edges(cls, m: int, edges: Iterable[tuple[int, int]], require_connected: bool = False) -> "Topology":
        a = np.zeros((m, m), dtype=np.int8)
        for i, j in edges:
            if i == j:
                raise ConfigurationError("self-loop in topology")
            a[i, j] = a[j, i] = 1
        return cls(a, require_connected=require_connected)

    @classmethod
    def complete(cls, m: int) -> "Topology":
        return cls(np.ones((m, m), dtype=np.int8) - np.eye(m, dtype=np.int8))

    @classmethod
    def ring(cls, m: int, order: Sequence[int] | None = None) -> "Topology":
        """Cycle through ``order`` (default ``0..m-1``); a single edge for m=2."""
        order = list(range(m)) if order is None else list(order)
        if sorted(order) != list(range(m)):
            raise ConfigurationError("ring order must be a permutation of the workers")
        if m < 2:
            return cls(np.zeros((m, m), dtype=np.int8))
        edges = [(order[k], order[(k + 1) % m]) for k in range(m if m > 2 else 1)]
        return cls.from_edges(m, edges)

    @classmethod
    def kregular(cls, m: int, k: int) -> "Topology":
        """Circulant k-regular graph: k//2 neighbors each side, plus the antipode when k is odd."""
        if k < 1 or k >= m:
            raise ConfigurationError(f"k-regular topology needs 1 <= k < m, got k={k}, m={m}")
        if k % 2 and m % 2:
            raise ConfigurationError("a k-regular graph with odd k needs an even number of workers")
        edges = []
        for i in range(m):
            for off in range(1, k // 2 + 1):
                edges.append((i, (i + off) % m))
            if k % 2:
                edges.append((i, (i + m // 2) % m))
        return cls.from_edges(m, edges)


@dataclass
class MixingMatrix:
    P: np.ndarray
    alpha: float
    eigenvalues: np.ndarray  # ascending Laplacian spectrum

    def averaging_operator(self) -> np.ndarray:
        """M = I - alpha * L; rows sum to one."""
        return np.eye(len(self.P)) - (np.diag(self.P.sum(axis=1)) - self.P)


def laplacian_spectrum(topology: Topology) -> np.ndarray:
    """Ascending eigenvalues of L = D - A; values within 1e-9 of an integer are snapped to it."""
    eig = np.linalg.eigvalsh(topology.laplacian())
    near = np.round(eig)
    eig = np.where(np.abs(eig - near) < _EIG_SNAP, near, eig)
    return np.sort(eig)


def mixing_matrix(topology: Topology) -> MixingMatrix:
    """Best constant edge weight 2 / (lambda_2 + lambda_m) of the Laplacian."""
    m = topology.m
    eig = laplacian_spectrum(topology)
    if m == 1:
        return MixingMatrix(P=np.zeros((1, 1)), alpha=0.0, eigenvalues=eig)
    if not topology.is_connected():
        raise ConfigurationError("mixing weights need a connected topology (lambda_2 = 0)")
    alpha = 2.0 / (eig[1] + eig[-1])
    P = alpha * topology.adj.astype(np.float64)
    return MixingMatrix(P=P, alpha=float(alpha), eigenvalues=eig)


def stack_params(params: Sequence[ModelParams]) -> np.ndarray:
    return np.stack([p.flat() for p in params])


def aggregate(params: Sequence[ModelParams], mixing: MixingMatrix) -> list[ModelParams]:
    """w_i <- w_i + sum_j P_ij (w_j - w_i), all workers from the same snapshot."""
    X = stack_params(params)
    P = mixing.P
    if P.shape != (len(params), len(params)):
        raise ConfigurationError("mixing matrix size does not match the number of workers")
    new = X + P @ X - P.sum(axis=1)[:, None] * X
    return [p.unflat(row) for p, row in zip(params, new)]


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``X`` (m x P)."""
    m = X.shape[0]
    D = np.zeros((m, m))
    for i in range(m):
        D[i] = np.sqrt(np.sum((X - X[i]) ** 2, axis=1))
    return np.minimum(D, D.T)


@dataclass
class ConsensusStats:
    per_worker: np.ndarray  # C_i
    global_distance: float  # C
    estimate: float | None = None  # C-hat
    c_max: float | None = None
    pairwise: np.ndarray | None = None  # C_ij, NaN where unobserved


def consensus_exact(params: Sequence[ModelParams] | np.ndarray) -> ConsensusStats:
    X = params if isinstance(params, np.ndarray) else stack_params(params)
    mean = X.mean(axis=0)
    per = np.sqrt(np.sum((X - mean) ** 2, axis=1))
    return ConsensusStats(per_worker=per, global_distance=float(per.mean()))


def estimate_pairwise(pairwise: np.ndarray) -> np.ndarray:
    """C-hat_ij = min over relays q not in {i, j} of C_iq + C_qj.

    NaN entries of ``pairwise`` are unobserved and cannot serve as relay legs.
    Pairs without any relay fall back to the direct distance (NaN if that is
    unobserved too). The diagonal is zero.
    """
    C = np.asarray(pairwise, dtype=np.float64)
    m = C.shape[0]
    est = np.full((m, m), np.nan)
    for i in range(m):
        for j in range(m):
            if i == j:
                est[i, j] = 0.0
                continue
            legs = C[i] + C[j]
            legs[[i, j]] = np.nan
            if np.any(~np.isnan(legs)):
                est[i, j] = np.nanmin(legs)
            else:
                est[i, j] = C[i, j]
    return est


def consensus_estimate(pairwise: np.ndarray, topology: Topology) -> tuple[float, np.ndarray]:
    """Global estimate (1/m^2) sum_ij (1 - a_ij) C-hat_ij over off-diagonal pairs.

    Returns the scalar estimate and the per-pair estimate matrix. Pairs whose
    estimate is unavailable contribute nothing.
    """
    m = topology.m
    est = estimate_pairwise(pairwise)
    weight = (1 - topology.adj).astype(np.float64)
    np.fill_diagonal(weight, 0.0)
    contrib = np.where(np.isnan(est), 0.0, est) * weight
    return float(contrib.sum() / (m * m)), est


def update_cmax(prev: float | None, mean_grad_norm: float, beta: float) -> float:
    """Exponential moving average of the mean gradient norm; seeds itself on first use."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError("beta must be in [0, 1]")
    if prev is None:
        return float(mean_grad_norm)
    return (1.0 - beta) * prev + beta * mean_grad_norm
