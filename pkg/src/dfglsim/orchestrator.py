"""Synchronous round loop: configuration update, local training, model aggregation, bookkeeping."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from . import gcnmodel as gm
from .config import SimConfig, rng_for, seed_for
from .consensus import (
    aggregate,
    consensus_estimate,
    consensus_exact,
    mixing_matrix,
    pairwise_distances,
    stack_params,
    update_cmax,
)
from .ddpgctl import (
    AgentAction,
    AgentConfig,
    DDPGAgent,
    TrainDiagnostics,
    Transition,
    action_dim,
    build_state,
    decode_action,
    moving_avg_time,
    reward,
    state_dim,
    state_layout,
)
from .errors import ConfigurationError, SimError
from .fedworker import EmbeddingMailbox, SamplingPlan, Worker, graph_sampling, privacy_audit, serve_requests
from .graphdata import (
    GlobalGraph,
    PartitionSpec,
    build_subgraphs,
    dirichlet_partition,
    generate_sbm,
    load_graph,
    split_masks_per_worker,
)
from .netmodel import (
    BandwidthState,
    TimingReport,
    TrafficLedger,
    TransferRecord,
    bits_to_mb,
    comm_time,
    compute_time,
    sample_bandwidth,
)
from .policies import Configuration, TrainingStats, parse_policy, validate_configuration

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "round", "t_round", "cum_time_s", "cum_embed_MB", "cum_model_MB", "mean_loss", "mean_acc",
    "C_exact", "C_est", "C_max", "edges", "mean_ratio", "reward",
]
STREAMS = ("graph", "masks", "partition", "bandwidth", "speeds", "init", "train", "policy",
           "agent_init", "agent_noise")


# ---------------------------------------------------------------- reward bookkeeping


class RewardTracker:
    """Smoothed round time and C_max, shared by every policy so rewards are always reported."""

    def __init__(self, config: AgentConfig):
        self.config = config
        self.t_bar: float | None = None
        self.c_max: float | None = None

    def update(self, t: float, consensus: float, mean_grad_norm: float, mean_loss: float) -> float:
        self.c_max = update_cmax(self.c_max, mean_grad_norm, self.config.beta)
        t_prev = t if self.t_bar is None else self.t_bar
        u = float("nan")
        if self.config.loss_threshold is not None and t_prev > 0:
            u = reward(t, t_prev, consensus, self.c_max, mean_loss, self.config)
        self.t_bar = moving_avg_time(t, self.t_bar, self.config.upsilon)
        return u


class Controller:
    """Coordinator side of the learning loop around a DDPG agent."""

    def __init__(self, m: int, config: AgentConfig, init_rng: np.random.Generator,
                 noise_rng: np.random.Generator, explore: bool = True):
        if config.loss_threshold is None:
            raise ConfigurationError("the ddpg policy needs agent.loss_threshold")
        self.m = m
        self.config = config
        self.agent = DDPGAgent(state_dim(m), action_dim(m), config, init_rng, groups=state_layout(m))
        self.agent.rng = noise_rng
        self.agent.buffer.rng = noise_rng
        self.explore = explore
        self.state: np.ndarray | None = None
        self.last_raw: np.ndarray | None = None
        self.last_action: AgentAction | None = None

    def begin(self, state: np.ndarray) -> None:
        self.state = state
        self.agent.observe(state)

    def choose(self, stats: TrainingStats) -> AgentAction:
        if self.state is None:
            raise ConfigurationError("controller has no state; call begin() first")
        raw = self.agent.act(self.state, explore=self.explore)
        self.last_raw = raw
        self.last_action = decode_action(raw, self.m, self.config.r_min)
        return self.last_action

    def feedback(self, u: float, next_state: np.ndarray) -> TrainDiagnostics | None:
        """Store (s, a, u, s'), train once, decay exploration and move to s'."""
        self.agent.store(Transition(self.state, self.last_raw, float(u), next_state))
        self.agent.observe(next_state)
        diag = None
        for _ in range(self.config.updates_per_round):
            diag = self.agent.train_step() or diag
        self.agent.decay_noise()
        self.state = next_state
        return diag


# ---------------------------------------------------------------- setup


def build_graph(cfg: SimConfig) -> GlobalGraph:
    g = cfg.graph
    if g.edge_file or g.table_file:
        if not (g.edge_file and g.table_file):
            raise ConfigurationError("graph.edge_file and graph.table_file go together")
        return load_graph(g.edge_file, g.table_file, g.test_fraction, seed_for(cfg.seed, "masks"))
    return generate_sbm(g.num_nodes, g.num_classes, g.p_intra, g.p_inter, g.d0, seed_for(cfg.seed, "graph"),
                        feature_margin=g.feature_margin, test_fraction=g.test_fraction)


def build_workers(cfg: SimConfig, graph: GlobalGraph | None = None) -> tuple[GlobalGraph, list[Worker]]:
    graph = graph if graph is not None else build_graph(cfg)
    m = cfg.workers
    spec = PartitionSpec(m, cfg.partition.alpha, seed_for(cfg.seed, "partition"), cfg.partition.min_size)
    owner = dirichlet_partition(graph, spec)
    graph = split_masks_per_worker(graph, owner, cfg.graph.test_fraction, seed_for(cfg.seed, "masks"))
    subgraphs = build_subgraphs(graph, owner)
    if len(subgraphs) < m:
        raise ConfigurationError("partition left trailing workers without nodes")
    net = cfg.network
    speeds = rng_for(cfg.seed, "speeds").choice(np.array(net.speed_tiers), size=m, p=np.array(net.tier_probs))
    hp = cfg.model
    workers = []
    for i, sg in enumerate(subgraphs):
        init_rng = rng_for(cfg.seed, "init" if cfg.shared_init else f"init/{i}")
        params = gm.init_params(graph.d0, hp.hidden_dims, graph.num_classes, init_rng)
        workers.append(Worker(i, sg, graph, params, hp, rng_for(cfg.seed, f"train/{i}"), float(speeds[i]),
                              cfg.private_first_layer))
    return graph, workers


def nominal_volumes(workers: Sequence[Worker], tau: int) -> np.ndarray:
    """Unsampled embedding bits per round that worker i would send to worker j.

    Built from a ratio-1 plan over all of j's training nodes with every other
    worker reachable, scaled by the mini-batch fraction and by tau.
    """
    m = len(workers)
    out = np.zeros((m, m))
    for j, w in enumerate(workers):
        train = w.subgraph.train_nodes
        if len(train) == 0:
            continue
        others = [k for k in range(m) if k != j]
        plan = graph_sampling(train, 1.0, w.num_layers, others, w.subgraph, None, w.private_first_layer)
        frac = min(1.0, w.hyper.batch_size / len(train))
        dims = w.params.dims
        for owner, items in plan.requests().items():
            out[owner, j] += tau * frac * sum(dims[l] * gm.BITS_PER_VALUE for _, l in items)
    return out


def fetch_embeddings(
    plan: SamplingPlan,
    workers: Sequence[Worker],
    tables: Sequence[list[np.ndarray] | None],
    on_transfer: Callable[[int, int, int, int], None] | None = None,
) -> EmbeddingMailbox:
    """Serve every request of ``plan`` from the owners' snapshot tables."""
    me = plan.worker_id
    reqs = plan.requests()
    box = EmbeddingMailbox(me, reqs)
    for owner, items in reqs.items():
        server = workers[owner]
        vectors, bits = serve_requests(me, items, owner, server.neighbors, tables[owner], server.subgraph)
        box.deliver(owner, items, vectors, bits)
        if on_transfer is not None:
            per_layer: dict[int, int] = {}
            for _, l in items:
                per_layer[l] = per_layer.get(l, 0) + 1
            for l, n in sorted(per_layer.items()):
                on_transfer(owner, l, n, n * workers[owner].params.dims[l] * gm.BITS_PER_VALUE)
    return box


@dataclass
class EvalResult:
    mean: float
    per_worker: np.ndarray
    empty: list[int]


def evaluate(workers: Sequence[Worker], nodes: Sequence[Sequence[int]] | None = None) -> EvalResult:
    """Unsampled forward pass on each worker's test nodes with current parameters.

    Only local embeddings and those of current topology neighbors are used.
    Workers with no evaluation nodes get NaN and are listed in ``empty``.
    """
    tables = [w.embedding_table() for w in workers]
    accs = np.full(len(workers), np.nan)
    empty = []
    for k, w in enumerate(workers):
        target = w.subgraph.test_nodes if nodes is None else nodes[k]
        if len(target) == 0:
            empty.append(w.worker_id)
            continue
        plan = w.full_plan(target)
        accs[k] = w.accuracy(plan, fetch_embeddings(plan, workers, tables))
    mean = float(np.nanmean(accs)) if np.any(~np.isnan(accs)) else float("nan")
    return EvalResult(mean, accs, empty)


# ---------------------------------------------------------------- round loop


@dataclass
class RunResult:
    config: SimConfig
    metrics: list[dict[str, Any]]
    ledger: TrafficLedger
    trace: list[tuple[int, str, int]]
    workers: list[Worker]
    summary: dict[str, Any]
    controller_log: list[dict[str, Any]] = field(default_factory=list)
    controller: Controller | None = None


@contextlib.contextmanager
def _stage(round_k: int, name: str) -> Iterator[None]:
    try:
        yield
    except SimError as exc:
        raise type(exc)(f"round {round_k}, step {name}: {exc}") from exc


def _fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _map(pool: ThreadPoolExecutor | None, fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(x) for x in items]


def run(cfg: SimConfig, out_dir: str | Path | None = None, policy=None) -> RunResult:
    """Execute the configured experiment and optionally write its output files."""
    wall0 = time.perf_counter()
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    graph, workers = build_workers(cfg)
    m = len(workers)
    agent_cfg = cfg.agent
    r_min = agent_cfg.r_min

    controller = None
    if policy is None:
        if cfg.policy.strip().lower() == "ddpg":
            controller = Controller(m, agent_cfg, rng_for(cfg.seed, "agent_init"), rng_for(cfg.seed, "agent_noise"))
        policy = parse_policy(cfg.policy, m, seed_for(cfg.seed, "policy"), r_min, controller)
    elif getattr(policy, "controller", None) is not None:
        controller = policy.controller

    ledger = TrafficLedger(m)
    ledger.nominal = nominal_volumes(workers, cfg.tau)
    model_bits = gm.param_size_bits(workers[0].params)
    bw_seed = seed_for(cfg.seed, "bandwidth")
    net = cfg.network
    tracker = RewardTracker(agent_cfg)

    def bandwidth(k: int) -> BandwidthState:
        return sample_bandwidth(k, m, bw_seed, net.b_min, net.b_max)

    X0 = stack_params([w.params for w in workers])
    known = pairwise_distances(X0)  # history of observed pairwise distances
    per_worker_c = consensus_exact(X0).per_worker
    last_times = np.zeros(m)
    last_embed = np.zeros((m, m))
    last_losses = np.zeros(m)
    if controller is not None:
        controller.begin(build_state(bandwidth(1).as_vector(), last_times, last_embed, known, last_losses))

    metrics: list[dict[str, Any]] = []
    trace: list[tuple[int, str, int]] = []
    ctl_log: list[dict[str, Any]] = []
    cum_time = 0.0
    pool = ThreadPoolExecutor(max_workers=cfg.parallel) if cfg.parallel > 0 else None
    try:
        for k in range(1, cfg.rounds + 1):
            bw = bandwidth(k)

            # 1. configuration update
            with _stage(k, "configuration"):
                stats = TrainingStats(k, m, pairwise=known.copy(), per_worker_consensus=per_worker_c.copy(),
                                      extra={"bandwidth": bw})
                conf: Configuration = policy.propose(k, stats)
                validate_configuration(conf, m, r_min if controller is not None else 0.0)
                topo = conf.topology
                for i, w in enumerate(workers):
                    w.configure(topo.neighbors(i).tolist(), float(conf.ratios[i]))
                trace.append((k, "configure", -1))

            # 2. local training, all workers in lock step on one parameter snapshot per iteration
            with _stage(k, "local_training"):
                for t in range(cfg.tau):
                    tables = [w.embedding_table() for w in workers]
                    plans = _map(pool, lambda w: w.sample_plan(), workers)
                    boxes = []
                    for plan in plans:
                        dst = plan.worker_id

                        def bill(src, layer, n, bits, dst=dst, t=t):
                            ledger.log_transfer(TransferRecord(k, t, src, dst, layer, n, bits))

                        boxes.append(fetch_embeddings(plan, workers, tables, bill))
                    _map(pool, lambda item: item[0].step(item[1], item[2]), list(zip(workers, plans, boxes)))
                    for w in workers:
                        trace.append((k, "train", w.worker_id))
                trace.append((k, "train_done", -1))

            # 3. model exchange and aggregation
            with _stage(k, "aggregation"):
                for i, j in topo.edges():
                    ledger.add_model(k, i, j, model_bits)
                    ledger.add_model(k, j, i, model_bits)
                X = stack_params([w.params for w in workers])
                D = pairwise_distances(X)
                observed = D.copy()
                if cfg.observability == "adjacent":
                    mask = topo.adj.astype(bool)
                    np.fill_diagonal(mask, True)
                    observed[~mask] = np.nan
                known = np.where(np.isnan(observed), known, observed)
                exact = consensus_exact(X)
                per_worker_c = exact.per_worker
                c_est, _ = consensus_estimate(observed, topo)
                new_params = aggregate([w.params for w in workers], mixing_matrix(topo))
                for w, p in zip(workers, new_params):
                    w.params = p
                trace.append((k, "aggregate", -1))

            # timing, loss and accuracy
            with _stage(k, "timing"):
                t_cp = np.array([compute_time(w.round_workload, w.speed, net.cost_per_row) for w in workers])
                t_com = np.zeros(m)
                if m > 1:
                    for i, w in enumerate(workers):
                        t_com[i] = comm_time(i, topo, w.ratio, ledger.nominal[i], model_bits, bw)
                report = TimingReport(t_cp, t_com)
                cum_time += report.t_round
            losses = np.array([np.mean(w.round_losses) if w.round_losses else np.nan for w in workers])
            mean_loss = float(np.nanmean(losses)) if np.any(~np.isnan(losses)) else float("nan")
            gnorm = float(np.mean([w.mean_grad_norm() for w in workers]))
            with _stage(k, "evaluation"):
                acc = evaluate(workers)
            c_for_reward = c_est if cfg.reward_consensus == "estimate" else exact.global_distance
            u = tracker.update(report.t_round, c_for_reward, gnorm, mean_loss)

            # controller update
            last_times = report.t_worker
            last_embed = ledger.embed_matrix(k)
            last_losses = np.nan_to_num(losses)
            if controller is not None:
                with _stage(k, "controller"):
                    nxt = build_state(bandwidth(k + 1).as_vector(), last_times, last_embed, known, last_losses)
                    diag = controller.feedback(u, nxt)
                    ctl_log.append({
                        "round": k, "reward": u,
                        "td_mean": diag.td_mean if diag else float("nan"),
                        "q_mean": diag.q_mean if diag else float("nan"),
                        "edges": topo.num_edges, "repaired": len(controller.last_action.repaired_edges),
                        "mean_ratio": float(np.mean(conf.ratios)), "sigma": controller.agent.sigma,
                    })

            emb_bits, mod_bits = ledger.cumulative()
            row = {
                "round": k,
                "t_round": report.t_round,
                "cum_time_s": cum_time,
                "cum_embed_MB": bits_to_mb(emb_bits),
                "cum_model_MB": bits_to_mb(mod_bits),
                "mean_loss": mean_loss,
                "mean_acc": acc.mean,
                "C_exact": exact.global_distance,
                "C_est": c_est,
                "C_max": tracker.c_max,
                "edges": topo.num_edges,
                "mean_ratio": float(np.mean(conf.ratios)),
                "reward": u,
            }
            metrics.append(row)
            log.info("round %d acc=%.4f loss=%.4f t=%.3fs edges=%d", k, acc.mean, mean_loss, report.t_round,
                     topo.num_edges)
            if cfg.target_accuracy is not None and acc.mean >= cfg.target_accuracy:
                break
    finally:
        if pool is not None:
            pool.shutdown()

    emb_bits, mod_bits = ledger.cumulative()
    summary = {
        "policy": getattr(policy, "name", cfg.policy),
        "rounds_executed": len(metrics),
        "final_accuracy": metrics[-1]["mean_acc"],
        "best_accuracy": max(r["mean_acc"] for r in metrics),
        "final_loss": metrics[-1]["mean_loss"],
        "total_time_s": cum_time,
        "embed_MB": bits_to_mb(emb_bits),
        "model_MB": bits_to_mb(mod_bits),
        "traffic_MB": bits_to_mb(emb_bits + mod_bits),
        "privacy_ok": privacy_audit(ledger.transfers),
        "conservation_ok": all(ledger.conserved(r) for r in ledger.rounds()),
        "stopped_early": len(metrics) < cfg.rounds,
        "wall_clock_s": time.perf_counter() - wall0,
    }
    result = RunResult(cfg, metrics, ledger, trace, workers, summary, ctl_log, controller)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_metrics(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRICS_HEADER])


def write_outputs(result: RunResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(result.metrics, out / "metrics.csv")
    result.ledger.to_csv(out / "traffic.csv")
    cfg = result.config
    doc = {
        "summary": result.summary,
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed, **{name: seed_for(cfg.seed, name) for name in STREAMS}},
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")
    with open(out / "trace.log", "w") as fh:
        for k, stage, w in result.trace:
            fh.write(f"{k}\t{stage}\t{w}\n" if w >= 0 else f"{k}\t{stage}\n")
    if result.controller_log:
        with open(out / "controller.csv", "w", newline="") as fh:
            keys = list(result.controller_log[0])
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(keys)
            for r in result.controller_log:
                wr.writerow([_fmt(r[c]) for c in keys])
    if result.controller is not None:
        result.controller.agent.save(out / "agent_checkpoint.npz")
    np.savez(out / "models.npz", **{f"worker_{w.worker_id}": w.params.flat() for w in result.workers})


def check_round_order(trace: Sequence[tuple[int, str, int]], num_workers: int, tau: int) -> bool:
    """True iff in every round all training events precede aggregation and nothing trains after it."""
    rounds: dict[int, list[tuple[str, int]]] = {}
    for k, stage, w in trace:
        rounds.setdefault(k, []).append((stage, w))
    for events in rounds.values():
        stages = [s for s, _ in events]
        if "aggregate" not in stages:
            return False
        agg = stages.index("aggregate")
        trained = [w for s, w in events[:agg] if s == "train"]
        if len(trained) != num_workers * tau or any(s == "train" for s in stages[agg:]):
            return False
        if stages[0] != "configure":
            return False
    return True
