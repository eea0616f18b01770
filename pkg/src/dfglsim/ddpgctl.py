"""Coordinator-side DDPG controller choosing the worker topology and sampling ratios each round."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .consensus import Topology
from .errors import ConfigurationError

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- networks


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class MLP:
    """Fully connected net with ReLU hidden layers and a linear or sigmoid output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out_activation: str = "linear",
                 out_scale: float = 1.0):
        if out_activation not in ("linear", "sigmoid"):
            raise ConfigurationError(f"unknown output activation {out_activation!r}")
        self.sizes = list(sizes)
        self.out_activation = out_activation
        self.params: list[np.ndarray] = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            lim = out_scale / np.sqrt(fan_in) if last else np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = h @ W + b
            if k < n_layers - 1:
                h = np.maximum(z, 0.0)
            elif self.out_activation == "sigmoid":
                h = _sigmoid(z)
            else:
                h = z
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(dout * output)`` w.r.t. parameters and input."""
        n_layers = len(self.params) // 2
        grads: list[np.ndarray] = [np.empty(0)] * len(self.params)
        out = acts[-1]
        if self.out_activation == "sigmoid":
            dz = dout * out * (1.0 - out)
        else:
            dz = dout
        for k in range(n_layers - 1, -1, -1):
            W = self.params[2 * k]
            h_in = acts[k]
            grads[2 * k] = h_in.T @ dz
            grads[2 * k + 1] = dz.sum(axis=0)
            dh = dz @ W.T
            if k > 0:
                dz = dh * (acts[k] > 0)
        return grads, dh

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for k, p in enumerate(self.params):
            self.params[k] = vec[pos : pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def copy(self) -> "MLP":
        clone = object.__new__(MLP)
        clone.sizes = list(self.sizes)
        clone.out_activation = self.out_activation
        clone.params = [p.copy() for p in self.params]
        return clone

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def descend(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place Adam step along ``-grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in enumerate(grads):
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------- state


def state_layout(m: int) -> dict[str, slice]:
    """Offsets of the bandwidth, round-time, embedding-volume, distance and loss groups."""
    sizes = [("bandwidth", 2 * m), ("time", m), ("embed", m * m), ("distance", m * m), ("loss", m)]
    out, pos = {}, 0
    for name, n in sizes:
        out[name] = slice(pos, pos + n)
        pos += n
    return out


def state_dim(m: int) -> int:
    return 2 * m + m + 2 * m * m + m


def build_state(
    bandwidth: np.ndarray,
    round_times: np.ndarray,
    embed_bits: np.ndarray,
    distances: np.ndarray,
    losses: np.ndarray,
) -> np.ndarray:
    """Concatenate the observation groups; unknown (NaN) entries become 0."""
    vec = np.concatenate(
        [
            np.ravel(bandwidth),
            np.ravel(round_times),
            np.ravel(embed_bits),
            np.ravel(distances),
            np.ravel(losses),
        ]
    ).astype(np.float64)
    return np.nan_to_num(vec, nan=0.0, posinf=0.0, neginf=0.0)


class RunningNorm:
    """Per-group running mean / variance standardization (Welford over every entry of a group)."""

    def __init__(self, groups: dict[str, slice], eps: float = 1e-8):
        self.groups = groups
        self.eps = eps
        self.count = {g: 0 for g in groups}
        self.mean = {g: 0.0 for g in groups}
        self.m2 = {g: 0.0 for g in groups}

    def update(self, x: np.ndarray) -> None:
        for g, sl in self.groups.items():
            for v in np.ravel(x[sl]):
                self.count[g] += 1
                d = v - self.mean[g]
                self.mean[g] += d / self.count[g]
                self.m2[g] += d * (v - self.mean[g])

    def std(self, g: str) -> float:
        n = self.count[g]
        return float(np.sqrt(self.m2[g] / n)) if n > 1 else 1.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=np.float64, copy=True)
        for g, sl in self.groups.items():
            out[..., sl] = (out[..., sl] - self.mean[g]) / (self.std(g) + self.eps)
        return out


# ---------------------------------------------------------------- replay


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.items: list[Transition] = []
        self.next = 0

    def __len__(self) -> int:
        return len(self.items)

    def store(self, tr: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(tr)
        else:
            self.items[self.next] = tr
        self.next = (self.next + 1) % self.capacity

    def sample(self, batch_size: int) -> tuple[list[Transition], bool]:
        """Uniform draw without replacement; when the buffer is smaller, all of it with ``short=True``."""
        if not self.items:
            raise ConfigurationError("cannot sample from an empty replay buffer")
        if len(self.items) <= batch_size:
            return list(self.items), len(self.items) < batch_size
        idx = self.rng.choice(len(self.items), size=batch_size, replace=False)
        return [self.items[i] for i in idx], False


# ---------------------------------------------------------------- agent


@dataclass
class AgentConfig:
    gamma: float = 0.9
    xi: float = 0.01  # target-network update coefficient
    chi: float = 2.0
    varrho: float = 1.0
    varphi: float = 10.0
    upsilon: float = 0.5  # round-time smoothing
    beta: float = 0.5  # C_max smoothing
    loss_threshold: float | None = None
    noise_sigma: float = 0.2
    noise_decay: float = 0.995
    inner_updates: int = 4
    batch_size: int = 32
    buffer_capacity: int = 10000
    hidden: tuple[int, int] = (128, 128)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    r_min: float = 0.05
    warmup: int = 1  # transitions required before training starts
    updates_per_round: int = 1  # accumulated updates applied after each stored transition

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 <= self.gamma < 1:
            raise ConfigurationError("gamma must be in [0, 1)")
        if not 0 < self.xi <= 1:
            raise ConfigurationError("xi must be in (0, 1]")
        if not 0 < self.upsilon < 1:
            raise ConfigurationError("upsilon must be in (0, 1)")
        if not 0 <= self.beta <= 1:
            raise ConfigurationError("beta must be in [0, 1]")
        if min(self.chi, self.varrho, self.varphi) <= 0:
            raise ConfigurationError("reward weights chi, varrho, varphi must be positive")
        if not 0 < self.r_min <= 1:
            raise ConfigurationError("r_min must be in (0, 1]")
        if min(self.inner_updates, self.batch_size, self.updates_per_round) < 1:
            raise ConfigurationError("inner_updates, batch_size and updates_per_round must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainDiagnostics:
    td_mean: float
    td_abs_mean: float
    q_mean: float
    batch_size: int
    short: bool


class DDPGAgent:
    """Actor / critic pair with target copies, replay buffer and Gaussian exploration."""

    def __init__(self, state_dim: int, action_dim: int, config: AgentConfig, rng: np.random.Generator,
                 groups: dict[str, slice] | None = None):
        self.config = config
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.rng = rng
        h1, h2 = config.hidden
        self.actor = MLP([state_dim, h1, h2, action_dim], rng, out_activation="sigmoid", out_scale=0.1)
        self.critic = MLP([state_dim + action_dim, h1, h2, 1], rng, out_scale=0.1)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, config.actor_lr)
        self.critic_opt = Adam(self.critic.params, config.critic_lr)
        self.buffer = ReplayBuffer(config.buffer_capacity, rng)
        self.norm = RunningNorm(groups if groups is not None else {"all": slice(0, state_dim)})
        self.sigma = config.noise_sigma

    # -- acting

    def observe(self, state: np.ndarray) -> None:
        self.norm.update(state)

    def act(self, state: np.ndarray, explore: bool = False) -> np.ndarray:
        raw = self.actor(self.norm(state)[None, :])[0]
        if explore and self.sigma > 0:
            raw = np.clip(raw + self.rng.normal(0.0, self.sigma, size=raw.shape), 0.0, 1.0)
        return raw

    def decay_noise(self) -> None:
        self.sigma *= self.config.noise_decay

    def store(self, tr: Transition) -> None:
        self.buffer.store(tr)

    # -- learning

    def _arrays(self, batch: Sequence[Transition]):
        s = self.norm(np.stack([t.state for t in batch]))
        a = np.stack([t.action for t in batch])
        u = np.array([t.reward for t in batch], dtype=np.float64)
        s2 = self.norm(np.stack([t.next_state for t in batch]))
        return s, a, u, s2

    def targets(self, reward: np.ndarray, next_state_norm: np.ndarray) -> np.ndarray:
        """y = u + gamma * Q'(s', pi'(s'))."""
        a2 = self.actor_target(next_state_norm)
        q2 = self.critic_target(np.concatenate([next_state_norm, a2], axis=1))[:, 0]
        return reward + self.config.gamma * q2

    def batch_gradients(self, batch: Sequence[Transition]):
        """Ascent directions for one mini-batch.

        Critic: (1/|B|) sum delta * grad Q(s, a). Actor: (1/|B|) sum grad_theta Q(s, pi(s)).
        """
        s, a, u, s2 = self._arrays(batch)
        n = len(batch)
        y = self.targets(u, s2)
        q, c_acts = self.critic.forward(np.concatenate([s, a], axis=1))
        delta = y - q[:, 0]
        critic_grads, _ = self.critic.backward(c_acts, (delta / n)[:, None])

        a_pi, a_acts = self.actor.forward(s)
        _, qa_acts = self.critic.forward(np.concatenate([s, a_pi], axis=1))
        _, d_in = self.critic.backward(qa_acts, np.full((n, 1), 1.0 / n))
        dq_da = d_in[:, self.state_dim :]
        actor_grads, _ = self.actor.backward(a_acts, dq_da)
        return critic_grads, actor_grads, delta, q[:, 0]

    def train_step(self) -> TrainDiagnostics | None:
        """Accumulate ``inner_updates`` mini-batch gradients, apply them once, then soft-update targets."""
        cfg = self.config
        if len(self.buffer) < max(1, cfg.warmup):
            return None
        acc_c = [np.zeros_like(p) for p in self.critic.params]
        acc_a = [np.zeros_like(p) for p in self.actor.params]
        deltas, qs, short_any, sizes = [], [], False, []
        for _ in range(cfg.inner_updates):
            batch, short = self.buffer.sample(cfg.batch_size)
            cg, ag, delta, q = self.batch_gradients(batch)
            for k in range(len(acc_c)):
                acc_c[k] += cg[k] / cfg.inner_updates
            for k in range(len(acc_a)):
                acc_a[k] += ag[k] / cfg.inner_updates
            deltas.append(delta)
            qs.append(q)
            short_any |= short
            sizes.append(len(batch))
        # both accumulators are ascent directions
        self.critic_opt.descend(self.critic.params, [-g for g in acc_c])
        self.actor_opt.descend(self.actor.params, [-g for g in acc_a])
        soft_update(self, cfg.xi)
        d = np.concatenate(deltas)
        return TrainDiagnostics(
            td_mean=float(d.mean()),
            td_abs_mean=float(np.abs(d).mean()),
            q_mean=float(np.concatenate(qs).mean()),
            batch_size=int(np.mean(sizes)),
            short=short_any,
        )

    # -- persistence

    def save(self, path: str | Path) -> None:
        arrays = {"version": np.array(CHECKPOINT_VERSION)}
        for name, net in (("actor", self.actor), ("critic", self.critic),
                          ("actor_target", self.actor_target), ("critic_target", self.critic_target)):
            for k, p in enumerate(net.params):
                arrays[f"{name}_{k}"] = p
        if len(self.buffer):
            arrays["buf_state"] = np.stack([t.state for t in self.buffer.items])
            arrays["buf_action"] = np.stack([t.action for t in self.buffer.items])
            arrays["buf_reward"] = np.array([t.reward for t in self.buffer.items])
            arrays["buf_next_state"] = np.stack([t.next_state for t in self.buffer.items])
        np.savez(path, **arrays)


def soft_update(agent: DDPGAgent, xi: float) -> None:
    """theta' <- xi * theta + (1 - xi) * theta' for both target networks."""
    for online, target in ((agent.actor, agent.actor_target), (agent.critic, agent.critic_target)):
        for k in range(len(target.params)):
            target.params[k] = xi * online.params[k] + (1.0 - xi) * target.params[k]


# ---------------------------------------------------------------- reward


def moving_avg_time(t: float, t_bar_prev: float | None, upsilon: float) -> float:
    if t_bar_prev is None:
        return float(t)
    return upsilon * t + (1.0 - upsilon) * t_bar_prev


def reward(t: float, t_bar_prev: float, consensus: float, c_max: float, mean_loss: float,
           config: AgentConfig) -> float:
    """-chi (t / t_bar - 1) + varrho (C_max - C) + varphi ** (F - mean_loss)."""
    if t_bar_prev <= 0:
        raise ConfigurationError("previous mean round time must be positive")
    if config.loss_threshold is None:
        raise ConfigurationError("reward needs a loss threshold")
    return (
        -config.chi * (t / t_bar_prev - 1.0)
        + config.varrho * (c_max - consensus)
        + config.varphi ** (config.loss_threshold - mean_loss)
    )


# ---------------------------------------------------------------- actions


def action_dim(m: int) -> int:
    return m * (m - 1) // 2 + m


def upper_pairs(m: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


@dataclass
class AgentAction:
    raw: np.ndarray
    topology: Topology
    ratios: np.ndarray
    repaired_edges: list[tuple[int, int]] = field(default_factory=list)


def repair_connectivity(adj: np.ndarray, scores: dict[tuple[int, int], float]) -> list[tuple[int, int]]:
    """Add absent edges in descending score order (ties: lexicographic) when they join two components.

    Mutates ``adj``; returns the added edges.
    """
    m = adj.shape[0]
    parent = list(range(m))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in zip(*np.nonzero(np.triu(adj, 1))):
        parent[find(int(i))] = find(int(j))
    components = len({find(i) for i in range(m)})
    added = []
    for (i, j) in sorted((p for p in scores if not adj[p]), key=lambda p: (-scores[p], p)):
        if components == 1:
            break
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            adj[i, j] = adj[j, i] = 1
            added.append((i, j))
            components -= 1
    return added


def decode_action(raw: np.ndarray, m: int, r_min: float) -> AgentAction:
    """Edge scores >= 0.5 become links; the graph is made connected; ratio scores map onto [r_min, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (action_dim(m),):
        raise ConfigurationError(f"raw action must have length {action_dim(m)}")
    pairs = upper_pairs(m)
    edge_scores = raw[: len(pairs)]
    ratio_scores = np.clip(raw[len(pairs) :], 0.0, 1.0)
    adj = np.zeros((m, m), dtype=np.int8)
    for (i, j), sc in zip(pairs, edge_scores):
        if sc >= 0.5:
            adj[i, j] = adj[j, i] = 1
    added = repair_connectivity(adj, {p: float(s) for p, s in zip(pairs, edge_scores)})
    ratios = r_min + ratio_scores * (1.0 - r_min)
    return AgentAction(raw=raw, topology=Topology(adj), ratios=ratios, repaired_edges=added)
