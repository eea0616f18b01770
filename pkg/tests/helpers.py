"""Shared oracles for the test suite."""
import numpy as np

from dfglsim import gcnmodel as gm


def random_gcn_instance(rng, n_max=8, d0=3, hidden=(4, 3), num_classes=3, n_remote=2):
    """Random 2-layer plan over at most ``n_max`` local nodes plus constant remote rows at layer 1."""
    n = int(rng.integers(3, n_max + 1))
    params = gm.init_params(d0, hidden, num_classes, rng)
    for k in params.tensors:
        params.tensors[k] = params.tensors[k] + 0.3 * rng.standard_normal(params.tensors[k].shape)
    h0 = rng.standard_normal((n, d0))
    nodes = list(range(n))
    layer1_targets = nodes[: max(2, n - 1)]
    specs = []
    lists = [[u for u in nodes if u != v and rng.random() < 0.5] for v in layer1_targets]
    specs.append(gm.LayerSpec.from_neighbor_lists(layer1_targets, lists, nodes))
    remote_ids = [100 + k for k in range(n_remote)]
    prev = layer1_targets + remote_ids
    batch = layer1_targets[: max(1, len(layer1_targets) - 1)]
    lists2 = [[u for u in prev if u != v and rng.random() < 0.6] for v in batch]
    specs.append(gm.LayerSpec.from_neighbor_lists(batch, lists2, prev))
    remote = [None, rng.standard_normal((n_remote, hidden[0]))]
    labels = rng.integers(0, num_classes, size=len(batch))
    return params, h0, specs, remote, labels


def loss_of(params, h0, specs, remote, labels):
    cache = gm.forward(params, h0, specs, remote)
    return gm.loss(cache.logits, labels)


def finite_difference(params, h0, specs, remote, labels, eps=1e-4):
    out = {}
    for k, t in params.tensors.items():
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + eps
            up = loss_of(params, h0, specs, remote, labels)
            t[idx] = orig - eps
            down = loss_of(params, h0, specs, remote, labels)
            t[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        out[k] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, floor=1e-6) -> float:
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst


def min_preactivation_margin(params, h0, specs, remote) -> float:
    cache = gm.forward(params, h0, specs, remote)
    return float(min(np.abs(lc.pre).min() for lc in cache.layers))


def gradcheck_instances(count, seed=0, eps=1e-4, n_max=8):
    """Max relative error over ``count`` random instances (those with a ReLU kink within 10*eps are redrawn)."""
    rng = np.random.default_rng(seed)
    errs = []
    while len(errs) < count:
        params, h0, specs, remote, labels = random_gcn_instance(rng, n_max=n_max)
        if min_preactivation_margin(params, h0, specs, remote) < 10 * eps:
            continue
        cache = gm.forward(params, h0, specs, remote)
        analytic = gm.backward(params, cache, labels).tensors
        numeric = finite_difference(params, h0, specs, remote, labels, eps)
        errs.append(max_relative_error(analytic, numeric))
    return errs


class ConcaveRatioBandit:
    """Stationary environment: fixed topology, reward a concave function of one decoded ratio.

    u(r) = peak - curvature * (r - r_star)^2, so the optimal mean reward is ``peak``.
    """

    def __init__(self, r_star=0.7, peak=1.0, curvature=4.0, r_min=0.05, state_dim=4):
        self.r_star, self.peak, self.curvature, self.r_min = r_star, peak, curvature, r_min
        self.state = np.linspace(0.5, 1.5, state_dim)

    def ratio(self, raw):
        return self.r_min + float(np.clip(raw[0], 0, 1)) * (1 - self.r_min)

    def reward(self, raw):
        return self.peak - self.curvature * (self.ratio(raw) - self.r_star) ** 2

    @property
    def optimum(self):
        return self.peak


def run_bandit(seed, steps=2000, tail=200, config=None):
    """Train a DDPG agent online on the bandit; return the mean reward of the last ``tail`` steps."""
    from dfglsim.ddpgctl import AgentConfig, DDPGAgent, Transition

    env = ConcaveRatioBandit()
    cfg = config or AgentConfig(loss_threshold=0.0)
    agent = DDPGAgent(len(env.state), 1, cfg, np.random.default_rng(seed))
    rewards = []
    s = env.state
    agent.observe(s)
    for _ in range(steps):
        a = agent.act(s, explore=True)
        u = env.reward(a)
        agent.store(Transition(s, a, u, s))
        agent.train_step()
        agent.decay_noise()
        rewards.append(u)
    return float(np.mean(rewards[-tail:])), env.optimum
