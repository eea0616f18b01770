"""Worker-side training: mini-batches, layer-wise neighbor sampling, embedding exchange, local updates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Collection, Iterable, Sequence

import numpy as np

from . import gcnmodel as gm
from .errors import ConfigurationError, ProtocolError
from .graphdata import GlobalGraph, Subgraph
from .netmodel import TransferRecord


def sample_size(ratio: float, n: int, rng: np.random.Generator | None) -> int:
    """Number of neighbors to keep out of ``n``.

    Stochastic rounding of ``ratio * n`` (so the expected fraction is exactly
    ``ratio`` whenever ``ratio * n >= 1``), floored at one neighbor.
    """
    if n == 0:
        return 0
    x = ratio * n
    k = math.floor(x)
    frac = x - k
    if frac > 0 and rng is not None and rng.random() < frac:
        k += 1
    return max(1, min(n, k))


@dataclass
class SamplingPlan:
    """Node sets and sampled neighbors for one mini-batch.

    ``local[l]`` are this worker's nodes whose ``h^l`` is computed here;
    ``remote[l]`` are ``(node, owner)`` pairs whose ``h^l`` is fetched.
    ``samples[l][v]`` is S^l(v) for ``v in local[l]`` and ``l >= 1``.
    """

    worker_id: int
    batch: np.ndarray
    local: list[list[int]]
    remote: list[list[tuple[int, int]]]
    samples: list[dict[int, list[int]]]
    n_eff: list[dict[int, int]]

    @property
    def num_layers(self) -> int:
        return len(self.local) - 1

    def prev_ids(self, l: int) -> list[int]:
        """Row order of the embedding matrix consumed by layer ``l``."""
        return self.local[l - 1] + [u for u, _ in self.remote[l - 1]]

    def layer_specs(self) -> list[gm.LayerSpec]:
        specs = []
        for l in range(1, self.num_layers + 1):
            targets = self.local[l]
            specs.append(
                gm.LayerSpec.from_neighbor_lists(targets, [self.samples[l][v] for v in targets], self.prev_ids(l))
            )
        return specs

    def requests(self) -> dict[int, list[tuple[int, int]]]:
        """owner -> sorted [(node, layer)] this plan needs from that worker."""
        out: dict[int, list[tuple[int, int]]] = {}
        for l, pairs in enumerate(self.remote):
            for u, w in pairs:
                out.setdefault(w, []).append((u, l))
        return {w: sorted(v, key=lambda t: (t[1], t[0])) for w, v in sorted(out.items())}

    def ratio_terms(self) -> list[float]:
        """|S(v)| / |N_eff(v)| for every sampled (layer, node) with a nonempty candidate set."""
        terms = []
        for l in range(1, self.num_layers + 1):
            for v, n in self.n_eff[l].items():
                if n:
                    terms.append(len(self.samples[l][v]) / n)
        return terms

    def realized_ratio(self) -> float:
        terms = self.ratio_terms()
        return float(np.mean(terms)) if terms else float("nan")

    def workload_rows(self) -> int:
        return sum(len(self.local[l]) + sum(len(s) for s in self.samples[l].values()) for l in range(1, self.num_layers + 1))


def graph_sampling(
    batch: Iterable[int],
    ratio: float,
    num_layers: int,
    topology_neighbors: Collection[int],
    subgraph: Subgraph,
    rng: np.random.Generator | None,
    private_first_layer: bool = True,
) -> SamplingPlan:
    """Top-down neighbor sampling from layer L to layer 1.

    Remote neighbors are candidates only if their owner is a topology
    neighbor and, under ``private_first_layer``, only above layer 1. Remote
    nodes are leaves: their embedding for the layer below is fetched, never
    expanded further.
    """
    if not 0 < ratio <= 1:
        raise ConfigurationError(f"sampling ratio must be in (0, 1], got {ratio}")
    allowed = set(int(w) for w in topology_neighbors)
    if subgraph.worker_id in allowed:
        raise ProtocolError("a worker cannot be its own topology neighbor")
    batch = sorted(int(v) for v in batch)
    for v in batch:
        if not subgraph.owns(v):
            raise ProtocolError(f"batch node {v} is not owned by worker {subgraph.worker_id}")

    L = num_layers
    local: list[list[int]] = [[] for _ in range(L + 1)]
    remote: list[list[tuple[int, int]]] = [[] for _ in range(L + 1)]
    samples: list[dict[int, list[int]]] = [{} for _ in range(L + 1)]
    n_eff: list[dict[int, int]] = [{} for _ in range(L + 1)]
    local[L] = batch

    for l in range(L, 0, -1):
        below_local = set(local[l])
        below_remote: dict[int, int] = {}
        use_remote = l >= 2 or not private_first_layer
        for v in local[l]:
            cand_nodes = subgraph.local_neighbors[v].tolist()
            cand_owner = [subgraph.worker_id] * len(cand_nodes)
            if use_remote:
                for u, w in subgraph.remote_neighbors[v]:
                    if w in allowed:
                        cand_nodes.append(u)
                        cand_owner.append(w)
            n = len(cand_nodes)
            k = sample_size(ratio, n, rng)
            if k == n:
                pick = range(n)
            else:
                pick = sorted(rng.choice(n, size=k, replace=False).tolist())
            chosen = [cand_nodes[p] for p in pick]
            samples[l][v] = chosen
            n_eff[l][v] = n
            for p in pick:
                if cand_owner[p] == subgraph.worker_id:
                    below_local.add(cand_nodes[p])
                else:
                    below_remote[cand_nodes[p]] = cand_owner[p]
        local[l - 1] = sorted(below_local)
        remote[l - 1] = sorted(below_remote.items())

    return SamplingPlan(
        worker_id=subgraph.worker_id,
        batch=np.array(batch, dtype=np.int64),
        local=local,
        remote=remote,
        samples=samples,
        n_eff=n_eff,
    )


def check_plan(
    plan: SamplingPlan,
    subgraph: Subgraph,
    topology_neighbors: Collection[int],
    private_first_layer: bool = True,
) -> list[str]:
    """Return a list of violated plan invariants (empty when the plan is valid)."""
    problems = []
    L = plan.num_layers
    allowed = set(topology_neighbors)
    if plan.local[L] != sorted(plan.batch.tolist()):
        problems.append("top layer differs from the mini-batch")
    for l in range(1, L + 1):
        if not set(plan.local[l]) <= set(plan.local[l - 1]):
            problems.append(f"local nodes of layer {l} missing from layer {l - 1}")
    for l in range(L + 1):
        for v in plan.local[l]:
            if not subgraph.owns(v):
                problems.append(f"node {v} listed as local on layer {l}")
        for u, w in plan.remote[l]:
            if w not in allowed:
                problems.append(f"remote node {u} owned by non-neighbor {w}")
            if w == subgraph.worker_id or subgraph.owns(u):
                problems.append(f"node {u} listed as remote but owned locally")
    if private_first_layer and plan.remote[0]:
        problems.append("raw features of remote nodes requested")
    for l in range(1, L + 1):
        prev = set(plan.prev_ids(l))
        for v in plan.local[l]:
            s = plan.samples[l].get(v)
            if s is None:
                problems.append(f"node {v} on layer {l} has no sample list")
                continue
            if len(set(s)) != len(s):
                problems.append(f"duplicate sample for node {v}")
            nbrs = set(subgraph.local_neighbors[v].tolist()) | {u for u, _ in subgraph.remote_neighbors[v]}
            if not set(s) <= nbrs:
                problems.append(f"sample of node {v} contains non-neighbors")
            if not set(s) <= prev:
                problems.append(f"sample of node {v} not resolvable on layer {l - 1}")
    return problems


class EmbeddingMailbox:
    """Embeddings received by one worker in one iteration, keyed by (owner, node, layer)."""

    def __init__(self, worker_id: int, requests: dict[int, list[tuple[int, int]]] | None = None):
        self.worker_id = worker_id
        self.requested = {(w, u, l) for w, items in (requests or {}).items() for u, l in items}
        self.entries: dict[tuple[int, int, int], np.ndarray] = {}
        self.received_bits = 0

    def deliver(self, owner: int, items: Sequence[tuple[int, int]], vectors: Sequence[np.ndarray], bits: int) -> None:
        for (u, l), vec in zip(items, vectors):
            key = (owner, u, l)
            if key not in self.requested:
                raise ProtocolError(f"unrequested embedding {key} delivered to worker {self.worker_id}")
            self.entries[key] = vec
        self.received_bits += bits

    def rows(self, pairs: Sequence[tuple[int, int]], layer: int, dim: int) -> np.ndarray:
        if not pairs:
            return np.zeros((0, dim))
        try:
            return np.stack([self.entries[(w, u, layer)] for u, w in pairs])
        except KeyError as exc:
            raise ProtocolError(f"missing embedding {exc.args[0]}") from None


def local_embedding_table(
    params: gm.ModelParams, subgraph: Subgraph, features: np.ndarray, upto_layer: int
) -> list[np.ndarray]:
    """h^0..h^upto_layer for every local node, aggregating full local neighborhoods only.

    ``features`` holds rows for ``subgraph.local_nodes`` in order.
    """
    nodes = subgraph.local_nodes.tolist()
    pos = {v: k for k, v in enumerate(nodes)}
    n = len(nodes)
    agg = np.zeros((n, n))
    for k, v in enumerate(nodes):
        nb = subgraph.local_neighbors[v]
        if len(nb):
            agg[k, [pos[u] for u in nb.tolist()]] = 1.0 / len(nb)
    spec = gm.LayerSpec(self_index=np.arange(n), agg=agg)
    tables = [features]
    h = features
    for l in range(1, upto_layer + 1):
        U, b = params.layer(l)
        h, _ = gm.gc_layer_forward(h, spec, U, b)
        tables.append(h)
    return tables


def serve_requests(
    requester: int,
    items: Sequence[tuple[int, int]],
    server_id: int,
    server_neighbors: Collection[int],
    table: Sequence[np.ndarray],
    subgraph: Subgraph,
) -> tuple[list[np.ndarray], int]:
    """Look up requested (node, layer) embeddings in the server's table; returns vectors and bits sent."""
    if requester not in server_neighbors:
        raise ProtocolError(f"worker {requester} is not a topology neighbor of worker {server_id}")
    pos = {int(v): k for k, v in enumerate(subgraph.local_nodes)}
    out, bits = [], 0
    for u, l in items:
        if u not in pos:
            raise ProtocolError(f"worker {server_id} does not own node {u}")
        vec = table[l][pos[u]]
        out.append(vec)
        bits += vec.size * gm.BITS_PER_VALUE
    return out, bits


def privacy_audit(transfers: Iterable[TransferRecord]) -> bool:
    """True iff no raw (layer-0) feature vector ever crossed a worker boundary."""
    return all(rec.layer >= 1 for rec in transfers if rec.src != rec.dst)


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    workload: int


class Worker:
    """State and procedures of one worker."""

    def __init__(
        self,
        worker_id: int,
        subgraph: Subgraph,
        graph: GlobalGraph,
        params: gm.ModelParams,
        hyper: gm.Hyperparams,
        rng: np.random.Generator,
        speed: float = 1.0,
        private_first_layer: bool = True,
    ):
        self.worker_id = worker_id
        self.subgraph = subgraph
        self.features = graph.features[subgraph.local_nodes]
        self.labels = graph.labels[subgraph.local_nodes]
        self._pos = {int(v): k for k, v in enumerate(subgraph.local_nodes)}
        self.params = params
        self.opt = gm.OptimizerState(params)
        self.hyper = hyper
        self.rng = rng
        self.speed = speed
        self.private_first_layer = private_first_layer
        self.ratio = 1.0
        self.neighbors: frozenset[int] = frozenset()
        self.last_loss = float("nan")
        self.round_losses: list[float] = []
        self.round_grad_norms: list[float] = []
        self.round_workload = 0

    @property
    def num_layers(self) -> int:
        return self.hyper.num_layers

    def configure(self, neighbors: Iterable[int], ratio: float) -> None:
        if not 0 < ratio <= 1:
            raise ConfigurationError(f"sampling ratio must be in (0, 1], got {ratio}")
        nb = frozenset(int(j) for j in neighbors)
        if self.worker_id in nb:
            raise ConfigurationError("neighbor set must exclude the worker itself")
        self.neighbors = nb
        self.ratio = float(ratio)
        self.round_losses, self.round_grad_norms, self.round_workload = [], [], 0

    def sample_batch(self) -> np.ndarray:
        train = self.subgraph.train_nodes
        k = min(self.hyper.batch_size, len(train))
        if k == len(train):
            return np.array(train)
        return np.sort(self.rng.choice(train, size=k, replace=False))

    def sample_plan(self, batch: np.ndarray | None = None) -> SamplingPlan:
        if batch is None:
            batch = self.sample_batch()
        return graph_sampling(
            batch, self.ratio, self.num_layers, self.neighbors, self.subgraph, self.rng, self.private_first_layer
        )

    def full_plan(self, nodes: Iterable[int]) -> SamplingPlan:
        """Unsampled (ratio 1) plan over ``nodes``; consumes no randomness."""
        return graph_sampling(
            nodes, 1.0, self.num_layers, self.neighbors, self.subgraph, None, self.private_first_layer
        )

    def embedding_table(self) -> list[np.ndarray]:
        return local_embedding_table(self.params, self.subgraph, self.features, self.num_layers - 1)

    def _forward(self, plan: SamplingPlan, mailbox: EmbeddingMailbox) -> gm.ForwardCache:
        dims = self.params.dims
        h0 = self.features[[self._pos[v] for v in plan.local[0]]]
        remote = [mailbox.rows(plan.remote[l], l, dims[l]) for l in range(plan.num_layers)]
        return gm.forward(self.params, h0, plan.layer_specs(), remote)

    def step(self, plan: SamplingPlan, mailbox: EmbeddingMailbox) -> StepResult:
        """Forward, loss, backward and one Adam update on a prepared plan."""
        labels = self.labels[[self._pos[v] for v in plan.local[plan.num_layers]]]
        cache = self._forward(plan, mailbox)
        loss = gm.loss(cache.logits, labels)
        grads = gm.backward(self.params, cache, labels)
        self.params = gm.adam_step(self.params, grads, self.opt, self.hyper)
        gnorm = gm.grad_norm(grads)
        work = plan.workload_rows()
        self.last_loss = loss
        self.round_losses.append(loss)
        self.round_grad_norms.append(gnorm)
        self.round_workload += work
        return StepResult(loss=loss, grad_norm=gnorm, workload=work)

    def mean_grad_norm(self) -> float:
        return float(np.mean(self.round_grad_norms)) if self.round_grad_norms else 0.0

    def predict(self, plan: SamplingPlan, mailbox: EmbeddingMailbox) -> np.ndarray:
        """Predicted classes of the plan's target nodes, in plan order."""
        cache = self._forward(plan, mailbox)
        return np.argmax(cache.logits, axis=1)

    def accuracy(self, plan: SamplingPlan, mailbox: EmbeddingMailbox) -> float:
        nodes = plan.local[plan.num_layers]
        if not nodes:
            return float("nan")
        pred = self.predict(plan, mailbox)
        return float(np.mean(pred == self.labels[[self._pos[v] for v in nodes]]))


# fetch(plan, iteration) -> mailbox filled with the embeddings the plan needs
Fetcher = Callable[[SamplingPlan, int], EmbeddingMailbox]


def local_training(worker: Worker, tau: int, fetch: Fetcher) -> list[StepResult]:
    """Run ``tau`` local iterations on one worker.

    The round loop drives all workers in lock step instead so that every
    served embedding comes from the same parameter snapshot; this helper is
    the single-worker form of the same procedure.
    """
    if tau < 0:
        raise ConfigurationError("tau must be >= 0")
    results = []
    for t in range(tau):
        plan = worker.sample_plan()
        mailbox = fetch(plan, t)
        results.append(worker.step(plan, mailbox))
    return results
