"""Analytic network cost model: per-round bandwidth, link sharing, round timing and traffic accounting.

Units are bits and Mbps (1e6 bit/s) throughout; megabytes are reported at
8e6 bits per MB.
"""
from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .consensus import Topology
from .errors import ConfigurationError

MBPS = 1e6
BITS_PER_MB = 8e6


class IsolatedWorkerWarning(UserWarning):
    """A worker without topology neighbors was asked for its communication time."""


@dataclass
class BandwidthState:
    b_in: np.ndarray  # Mbps
    b_out: np.ndarray
    b_min: float = 5.0
    b_max: float = 20.0

    def __post_init__(self) -> None:
        for arr in (self.b_in, self.b_out):
            if np.any(arr <= 0) or np.any(arr < self.b_min) or np.any(arr > self.b_max):
                raise ConfigurationError("bandwidth outside [b_min, b_max] or nonpositive")

    @property
    def m(self) -> int:
        return len(self.b_in)

    def as_vector(self) -> np.ndarray:
        """Interleaved (in, out) per worker, length 2m."""
        return np.stack([self.b_in, self.b_out], axis=1).ravel()


def sample_bandwidth(
    round_k: int, num_workers: int, seed: int, b_min: float = 5.0, b_max: float = 20.0
) -> BandwidthState:
    """I.i.d. uniform inbound/outbound bandwidth per worker for one round."""
    if not 0 < b_min <= b_max:
        raise ConfigurationError("need 0 < b_min <= b_max")
    rng = np.random.default_rng([seed, round_k])
    if b_min == b_max:
        full = np.full(num_workers, float(b_min))
        return BandwidthState(full, full.copy(), b_min, b_max)
    b_in = rng.uniform(b_min, b_max, num_workers)
    b_out = rng.uniform(b_min, b_max, num_workers)
    return BandwidthState(b_in, b_out, b_min, b_max)


def link_bandwidth(i: int, j: int, topology: Topology, bw: BandwidthState) -> float:
    """Mbps available on link i -> j when every worker splits its bandwidth evenly over its links."""
    if not topology.has_edge(i, j):
        raise ConfigurationError(f"({i}, {j}) is not a topology edge")
    return min(bw.b_out[i] / topology.degree(i), bw.b_in[j] / topology.degree(j))


def comm_time(
    i: int,
    topology: Topology,
    ratio: float,
    nominal_bits: np.ndarray | Sequence[float],
    model_bits: float,
    bw: BandwidthState,
) -> float:
    """Embedding term plus model term, each the slowest link of worker ``i``.

    ``nominal_bits[j]`` is the unsampled embedding volume on link (i, j).
    """
    nbrs = topology.neighbors(i)
    if len(nbrs) == 0:
        warnings.warn(f"worker {i} has no neighbors; communication time is 0", IsolatedWorkerWarning)
        return 0.0
    emb, mod = 0.0, 0.0
    for j in nbrs.tolist():
        b = link_bandwidth(i, j, topology, bw) * MBPS
        emb = max(emb, ratio * nominal_bits[j] / b)
        mod = max(mod, model_bits / b)
    return emb + mod


def compute_time(workload_rows: float, speed: float = 1.0, cost_per_row: float = 1e-5) -> float:
    """Seconds to process ``workload_rows`` aggregated embedding rows on a device of relative ``speed``."""
    if speed <= 0:
        raise ConfigurationError("speed factor must be positive")
    return cost_per_row * workload_rows / speed


def round_time(timings: Sequence[float] | np.ndarray) -> float:
    """Synchronous round: the slowest worker."""
    return float(np.max(timings))


@dataclass
class TimingReport:
    t_cp: np.ndarray
    t_com: np.ndarray

    @property
    def t_worker(self) -> np.ndarray:
        return self.t_cp + self.t_com

    @property
    def t_round(self) -> float:
        return round_time(self.t_worker)


@dataclass(frozen=True)
class TransferRecord:
    """One embedding transfer from a serving worker to a requesting worker."""

    round: int
    iteration: int
    src: int
    dst: int
    layer: int
    num_nodes: int
    bits: int


@dataclass
class TrafficLedger:
    """Per-round, per-ordered-link traffic. The round loop is its only writer."""

    num_workers: int
    embed: dict[tuple[int, int, int], int] = field(default_factory=lambda: defaultdict(int))
    model: dict[tuple[int, int, int], int] = field(default_factory=lambda: defaultdict(int))
    sent: dict[tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))
    received: dict[tuple[int, int], int] = field(default_factory=lambda: defaultdict(int))
    transfers: list[TransferRecord] = field(default_factory=list)
    nominal: np.ndarray | None = None  # (m, m) unsampled embedding bits per round

    def _check(self, src: int, dst: int, bits: int) -> None:
        if bits < 0:
            raise ConfigurationError("negative traffic")
        if src == dst:
            raise ConfigurationError("a worker does not send traffic to itself")

    def log_transfer(self, rec: TransferRecord) -> None:
        self._check(rec.src, rec.dst, rec.bits)
        self.transfers.append(rec)
        self.embed[(rec.round, rec.src, rec.dst)] += rec.bits
        self.sent[(rec.round, rec.src)] += rec.bits
        self.received[(rec.round, rec.dst)] += rec.bits

    def add_model(self, round_k: int, src: int, dst: int, bits: int) -> None:
        self._check(src, dst, bits)
        self.model[(round_k, src, dst)] += bits
        self.sent[(round_k, src)] += bits
        self.received[(round_k, dst)] += bits

    def rounds(self) -> list[int]:
        return sorted({k for k, _, _ in self.embed} | {k for k, _, _ in self.model})

    def round_totals(self, round_k: int) -> tuple[int, int]:
        e = sum(v for (k, _, _), v in self.embed.items() if k == round_k)
        mo = sum(v for (k, _, _), v in self.model.items() if k == round_k)
        return e, mo

    def embed_matrix(self, round_k: int) -> np.ndarray:
        out = np.zeros((self.num_workers, self.num_workers))
        for (k, s, d), v in self.embed.items():
            if k == round_k:
                out[s, d] += v
        return out

    def cumulative(self) -> tuple[int, int]:
        return sum(self.embed.values()), sum(self.model.values())

    def conserved(self, round_k: int) -> bool:
        """Bits sent by every worker equal bits received by their destinations."""
        links = defaultdict(int)
        for (k, s, d), v in list(self.embed.items()) + list(self.model.items()):
            if k == round_k:
                links[("out", s)] += v
                links[("in", d)] += v
        sent_ok = all(self.sent.get((round_k, w), 0) == links[("out", w)] for w in range(self.num_workers))
        recv_ok = all(self.received.get((round_k, w), 0) == links[("in", w)] for w in range(self.num_workers))
        total_ok = sum(self.sent.get((round_k, w), 0) for w in range(self.num_workers)) == sum(
            self.received.get((round_k, w), 0) for w in range(self.num_workers)
        )
        return sent_ok and recv_ok and total_ok

    def to_csv(self, path: str | Path) -> None:
        keys = sorted(set(self.embed) | set(self.model))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "src", "dst", "embed_bits", "model_bits"])
            for k, s, d in keys:
                w.writerow([k, s, d, self.embed.get((k, s, d), 0), self.model.get((k, s, d), 0)])


def bits_to_mb(bits: float) -> float:
    return bits / BITS_PER_MB
