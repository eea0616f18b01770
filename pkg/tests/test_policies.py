import numpy as np
import pytest
from hypothesis import given, strategies as st

from dfglsim.consensus import Topology
from dfglsim.errors import ConfigurationError
from dfglsim.policies import (
    Configuration,
    DistributionAwareRing,
    RandomTopologyPolicy,
    TrainingStats,
    greedy_far_ring,
    parse_policy,
    validate_configuration,
)


def test_fixed_policies_shapes():
    c = parse_policy("complete", 4).propose(1, TrainingStats(1, 4))
    assert c.topology.num_edges == 6 and c.ratios.tolist() == [1.0] * 4
    r = parse_policy("ring:r=0.3", 5).propose(1, TrainingStats(1, 5))
    assert np.all(r.topology.degree() == 2) and np.allclose(r.ratios, 0.3)
    k = parse_policy("kreg:4", 8).propose(1, TrainingStats(1, 8))
    assert np.all(k.topology.degree() == 4)


@pytest.mark.parametrize("spec", ["star", "kreg:x", "ring:r=0", "complete:r=1.5", "random:p=2", "ddpg"])
def test_parse_policy_errors(spec):
    with pytest.raises(ConfigurationError):
        parse_policy(spec, 4)


def test_kregular_needs_k_below_m():
    with pytest.raises(ConfigurationError):
        parse_policy("kreg:4", 4)


DIST = np.array([
    [0, 1, 2, 9],
    [1, 0, 3, 4],
    [2, 3, 0, 5],
    [9, 4, 5, 0],
], dtype=float)


def test_greedy_ring_order():
    # 0 -> farthest is 3 (9), 3 -> farthest left is 2 (5), then 1
    assert greedy_far_ring(DIST) == [0, 3, 2, 1]


def test_dar_proposal():
    ci = np.array([1.0, 2.0, 3.0, 6.0])  # mean 3
    cfg = DistributionAwareRing(4, r_min=0.2).propose(2, TrainingStats(2, 4, DIST, ci))
    assert cfg.topology.edges() == [(0, 1), (0, 3), (1, 2), (2, 3)]
    assert np.allclose(cfg.ratios, [0.2, 1 / 3, 0.5, 1.0])


def test_dar_requires_distances():
    with pytest.raises(ConfigurationError):
        DistributionAwareRing(3).propose(1, TrainingStats(1, 3))


@given(st.integers(3, 12), st.integers(0, 2**31))
def test_greedy_ring_is_hamiltonian_cycle(m, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, 3))
    D = np.linalg.norm(X[:, None] - X[None], axis=-1)
    order = greedy_far_ring(D)
    assert sorted(order) == list(range(m))
    topo = Topology.ring(m, order)
    assert np.all(topo.degree() == 2) and topo.is_connected()


@given(st.integers(2, 10), st.floats(0, 1), st.integers(0, 50))
def test_random_policy_connected(m, p, k):
    cfg = RandomTopologyPolicy(m, p, 0.5, seed=3).propose(k, TrainingStats(k, m))
    validate_configuration(cfg, m)


def test_random_policy_reproducible():
    a = RandomTopologyPolicy(6, 0.3, 1.0, seed=1).propose(4, TrainingStats(4, 6))
    b = RandomTopologyPolicy(6, 0.3, 1.0, seed=1).propose(4, TrainingStats(4, 6))
    assert np.array_equal(a.topology.adj, b.topology.adj)


def test_validator_rejects_bad_configurations():
    disconnected = Topology.from_edges(4, [(0, 1), (2, 3)])
    with pytest.raises(ConfigurationError):
        validate_configuration(Configuration(disconnected, np.ones(4)), 4)
    with pytest.raises(ConfigurationError):
        validate_configuration(Configuration(Topology.ring(4), np.ones(3)), 4)
    with pytest.raises(ConfigurationError):
        validate_configuration(Configuration(Topology.ring(4), np.array([1, 1, 0, 1.0])), 4)
    with pytest.raises(ConfigurationError):
        validate_configuration(Configuration(Topology.ring(4), np.full(4, 0.01)), 4, r_min=0.05)
    with pytest.raises(ConfigurationError):
        validate_configuration(Configuration(Topology.ring(5), np.ones(5)), 4)
