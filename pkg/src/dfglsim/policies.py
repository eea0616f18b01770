"""Configuration policies: each round they emit a worker topology and per-worker sampling ratios."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .consensus import Topology
from .ddpgctl import repair_connectivity, upper_pairs
from .errors import ConfigurationError


@dataclass
class TrainingStats:
    """What the coordinator knows when it picks the next configuration."""

    round: int
    m: int
    pairwise: np.ndarray | None = None  # model distances, NaN where unknown
    per_worker_consensus: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class Configuration:
    topology: Topology
    ratios: np.ndarray
    raw_action: np.ndarray | None = None


def validate_configuration(cfg: Configuration, m: int, r_min: float = 0.0) -> None:
    topo = cfg.topology
    if topo.m != m:
        raise ConfigurationError(f"topology has {topo.m} workers, expected {m}")
    if m > 1 and not topo.is_connected():
        raise ConfigurationError("topology must be connected")
    r = np.asarray(cfg.ratios)
    if r.shape != (m,) or np.any(r <= 0) or np.any(r > 1) or np.any(r < r_min - 1e-12):
        raise ConfigurationError("sampling ratios must lie in (max(0, r_min), 1]")


class Policy:
    name = "policy"
    needs_distances = False

    def propose(self, round_k: int, stats: TrainingStats) -> Configuration:
        raise NotImplementedError


def _ratio_vector(m: int, r: float) -> np.ndarray:
    if not 0 < r <= 1:
        raise ConfigurationError(f"sampling ratio must be in (0, 1], got {r}")
    return np.full(m, float(r))


class FixedPolicy(Policy):
    """Same topology and uniform ratio every round."""

    def __init__(self, topology: Topology, ratio: float, name: str):
        self.topology = topology
        self.ratio = ratio
        self.name = name
        self._ratios = _ratio_vector(topology.m, ratio)

    def propose(self, round_k: int, stats: TrainingStats) -> Configuration:
        return Configuration(self.topology, self._ratios.copy())


def fixed_complete(m: int, ratio: float = 1.0) -> FixedPolicy:
    return FixedPolicy(Topology.complete(m), ratio, f"complete:r={ratio}")


def fixed_ring(m: int, ratio: float = 1.0) -> FixedPolicy:
    return FixedPolicy(Topology.ring(m), ratio, f"ring:r={ratio}")


def fixed_kregular(m: int, k: int, ratio: float = 1.0) -> FixedPolicy:
    return FixedPolicy(Topology.kregular(m, k), ratio, f"kreg:{k}:r={ratio}")


class RandomTopologyPolicy(Policy):
    """Fresh Erdos-Renyi(p) topology each round, repaired to be connected."""

    def __init__(self, m: int, p: float, ratio: float, seed: int):
        if not 0 <= p <= 1:
            raise ConfigurationError("edge probability must be in [0, 1]")
        self.m, self.p, self.seed = m, p, seed
        self._ratios = _ratio_vector(m, ratio)
        self.name = f"random:p={p}:r={ratio}"

    def propose(self, round_k: int, stats: TrainingStats) -> Configuration:
        rng = np.random.default_rng([self.seed, round_k])
        pairs = upper_pairs(self.m)
        scores = rng.random(len(pairs))
        adj = np.zeros((self.m, self.m), dtype=np.int8)
        for (i, j), s in zip(pairs, scores):
            if s < self.p:
                adj[i, j] = adj[j, i] = 1
        repair_connectivity(adj, {pr: float(s) for pr, s in zip(pairs, scores)})
        return Configuration(Topology(adj), self._ratios.copy())


def greedy_far_ring(distances: np.ndarray) -> list[int]:
    """Worker order starting at 0, each step appending the unvisited worker farthest from the current end."""
    m = distances.shape[0]
    D = np.nan_to_num(np.asarray(distances, dtype=np.float64), nan=-np.inf)
    order = [0]
    left = set(range(1, m))
    while left:
        end = order[-1]
        nxt = max(sorted(left), key=lambda j: D[end, j])  # ties -> lowest id
        order.append(nxt)
        left.remove(nxt)
    return order


class DistributionAwareRing(Policy):
    """Ring linking far-apart models; ratio 0.5 * C_i / C per worker, clipped to [r_min, 1]."""

    needs_distances = True

    def __init__(self, m: int, r_min: float = 0.05, base_ratio: float = 0.5):
        self.m, self.r_min, self.base_ratio = m, r_min, base_ratio
        self.name = "dar"

    def propose(self, round_k: int, stats: TrainingStats) -> Configuration:
        if stats.pairwise is None or stats.per_worker_consensus is None:
            raise ConfigurationError("distribution-aware ring needs pairwise distances and consensus distances")
        order = greedy_far_ring(stats.pairwise)
        topo = Topology.ring(self.m, order)
        c_i = np.asarray(stats.per_worker_consensus, dtype=np.float64)
        c = c_i.mean()
        if c > 0:
            ratios = self.base_ratio * c_i / c
        else:
            ratios = np.full(self.m, self.base_ratio)
        return Configuration(topo, np.clip(ratios, self.r_min, 1.0))


class DDPGPolicy(Policy):
    """Wraps the controller; the round loop feeds it states and rewards."""

    needs_distances = True

    def __init__(self, controller):
        self.controller = controller
        self.name = "ddpg"

    def propose(self, round_k: int, stats: TrainingStats) -> Configuration:
        action = self.controller.choose(stats)
        return Configuration(action.topology, action.ratios, raw_action=action.raw)


_RATIO = r"(?::r=(?P<r>[0-9.eE+-]+))?"


def parse_policy(spec: str, m: int, seed: int = 0, r_min: float = 0.05, controller=None) -> Policy:
    """Build a policy from a string.

    Forms: ``complete[:r=R]``, ``ring[:r=R]``, ``kreg:K[:r=R]``,
    ``random:p=P[:r=R]``, ``dar``, ``ddpg``. ``R`` defaults to 1.
    """
    s = spec.strip().lower()
    if s == "ddpg":
        if controller is None:
            raise ConfigurationError("ddpg policy needs a controller")
        return DDPGPolicy(controller)
    if s in ("dar", "distribution_aware_ring"):
        return DistributionAwareRing(m, r_min=r_min)
    if mt := re.fullmatch(r"(complete|fixed_complete)" + _RATIO, s):
        return fixed_complete(m, float(mt["r"] or 1.0))
    if mt := re.fullmatch(r"(ring|fixed_ring)" + _RATIO, s):
        return fixed_ring(m, float(mt["r"] or 1.0))
    if mt := re.fullmatch(r"(kreg|fixed_kregular):(?P<k>\d+)" + _RATIO, s):
        return fixed_kregular(m, int(mt["k"]), float(mt["r"] or 1.0))
    if mt := re.fullmatch(r"(random|random_topology):p=(?P<p>[0-9.eE+-]+)" + _RATIO, s):
        return RandomTopologyPolicy(m, float(mt["p"]), float(mt["r"] or 1.0), seed)
    raise ConfigurationError(f"unknown policy {spec!r}")
