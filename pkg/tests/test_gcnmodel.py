import numpy as np
import pytest
from hypothesis import given, strategies as st

from dfglsim import gcnmodel as gm
from dfglsim.errors import ConfigurationError, ProtocolError

from helpers import finite_difference, gradcheck_instances, max_relative_error, random_gcn_instance


def _zero_params(d0=2, hidden=(3,), k=2):
    return gm.init_params(d0, hidden, k, np.random.default_rng(0)).zeros_like()


def test_empty_neighborhood_zero_weights_gives_relu_bias():
    spec = gm.LayerSpec.from_neighbor_lists([0], [[]], [0])
    U = np.zeros((3, 4))
    b = np.array([-1.0, 0.5, 2.0])
    h, _ = gm.gc_layer_forward(np.array([[1.0, 2.0]]), spec, U, b)
    assert h.tolist() == [[0.0, 0.5, 2.0]]


def test_singleton_neighbor_with_same_embedding():
    h_prev = np.array([[1.5, -2.0], [1.5, -2.0]])
    spec = gm.LayerSpec.from_neighbor_lists([0], [[1]], [0, 1])
    _, cache = gm.gc_layer_forward(h_prev, spec, np.zeros((2, 4)), np.zeros(2))
    assert np.array_equal(cache.concat[0, 2:], h_prev[0])


def test_star_hub_aggregation_matches_scalar_loop():
    rng = np.random.default_rng(1)
    h_prev = rng.standard_normal((5, 3))
    U = rng.standard_normal((2, 6))
    b = rng.standard_normal(2)
    spec = gm.LayerSpec.from_neighbor_lists([0], [[1, 2, 3, 4]], [0, 1, 2, 3, 4])
    h, _ = gm.gc_layer_forward(h_prev, spec, U, b)
    for out in range(2):
        acc = b[out]
        for f in range(3):
            acc += U[out, f] * h_prev[0, f]
            mean = (h_prev[1, f] + h_prev[2, f] + h_prev[3, f] + h_prev[4, f]) / 4
            acc += U[out, 3 + f] * mean
        assert abs(h[0, out] - max(acc, 0.0)) <= 1e-12


def test_unresolved_neighbor_is_protocol_error():
    with pytest.raises(ProtocolError):
        gm.LayerSpec.from_neighbor_lists([0], [[7]], [0, 1])


def test_predict_cases():
    h = np.random.default_rng(2).standard_normal((4, 3))
    assert np.all(gm.predict(h, np.zeros((3, 3)), np.zeros(3)) == 0)
    assert np.array_equal(gm.predict(h, np.eye(3), np.zeros(3)), h)
    W = np.random.default_rng(3).standard_normal((5, 3))
    c = np.random.default_rng(4).standard_normal(5)
    expect = np.array([[sum(h[i, k] * W[j, k] for k in range(3)) + c[j] for j in range(5)] for i in range(4)])
    assert np.max(np.abs(gm.predict(h, W, c) - expect)) <= 1e-12


def test_loss_uniform_logits():
    assert gm.loss(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0])) == pytest.approx(np.log(4), abs=1e-12)


def test_loss_decreases_with_margin():
    labels = np.array([0, 2])
    vals = [gm.loss(m * np.eye(3)[labels], labels) for m in (0.5, 1, 2, 4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_loss_matches_logsumexp_oracle():
    rng = np.random.default_rng(5)
    logits = 10 * rng.standard_normal((7, 4))
    labels = rng.integers(0, 4, 7)
    oracle = np.mean([np.log(np.sum(np.exp(row - row.max()))) + row.max() - row[y] for row, y in zip(logits, labels)])
    assert abs(gm.loss(logits, labels) - oracle) <= 1e-10


@given(st.permutations(list(range(6))))
def test_loss_invariant_to_batch_order(perm):
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, 6)
    perm = np.array(perm)
    assert gm.loss(logits, labels) == pytest.approx(gm.loss(logits[perm], labels[perm]), abs=1e-14)


def test_zero_everything_gives_only_head_bias_gradient():
    p = _zero_params()
    spec = gm.LayerSpec.from_neighbor_lists([0, 1], [[1], [0]], [0, 1])
    cache = gm.forward(p, np.zeros((2, 2)), [spec])
    g = gm.backward(p, cache, np.array([0, 0]))
    assert np.allclose(g.tensors["c"], [-0.5, 0.5])
    assert all(np.all(t == 0) for k, t in g.tensors.items() if k != "c")


def test_backward_matches_finite_differences_six_nodes():
    rng = np.random.default_rng(7)
    while True:
        params, h0, specs, remote, labels = random_gcn_instance(rng, n_max=6)
        if h0.shape[0] == 6:
            break
    cache = gm.forward(params, h0, specs, remote)
    analytic = gm.backward(params, cache, labels).tensors
    assert max_relative_error(analytic, finite_difference(params, h0, specs, remote, labels)) < 1e-4


def test_gradcheck_many_instances():
    assert max(gradcheck_instances(20, seed=11)) < 1e-4


def test_backward_scales_linearly():
    rng = np.random.default_rng(8)
    params, h0, specs, remote, labels = random_gcn_instance(rng)
    cache = gm.forward(params, h0, specs, remote)
    g1 = gm.backward(params, cache, labels)
    g2 = gm.backward(params, cache, labels, scale=2.0)
    for k in g1.tensors:
        assert np.allclose(g2.tensors[k], 2 * g1.tensors[k], rtol=0, atol=1e-15)


def test_adam_zero_gradient_no_decay_is_noop():
    p = gm.init_params(3, (4,), 2, np.random.default_rng(0))
    hp = gm.Hyperparams(weight_decay=0.0)
    q = gm.adam_step(p, p.zeros_like(), gm.OptimizerState(p), hp)
    assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.tensors)


def test_adam_first_step_scalar():
    p = gm.ModelParams({"U1": np.array([[0.0, 0.0]]), "b1": np.zeros(1), "W": np.zeros((1, 1)), "c": np.zeros(1)})
    g = p.zeros_like()
    g.tensors["c"] = np.array([1.0])
    q = gm.adam_step(p, g, gm.OptimizerState(p), gm.Hyperparams(weight_decay=0.0))
    assert q.tensors["c"][0] == pytest.approx(-0.01, abs=1e-9)


def test_adam_deterministic():
    rng = np.random.default_rng(9)
    params, h0, specs, remote, labels = random_gcn_instance(rng)
    hp = gm.Hyperparams()
    runs = []
    for _ in range(2):
        p, st_ = params.copy(), gm.OptimizerState(params)
        for _ in range(5):
            p = gm.adam_step(p, gm.backward(p, gm.forward(p, h0, specs, remote), labels), st_, hp)
        runs.append(p.flat())
    assert np.array_equal(runs[0], runs[1])


def test_param_distance_and_size():
    p = gm.init_params(3, (4,), 2, np.random.default_rng(0))
    assert gm.param_l2_distance(p, p) == 0.0
    q = p.copy()
    q.tensors["b1"][2] += 3.0
    assert gm.param_l2_distance(p, q) == pytest.approx(3.0, abs=1e-15)
    r = gm.init_params(3, (4,), 2, np.random.default_rng(1))
    assert abs(gm.param_l2_distance(p, r) - np.linalg.norm(p.flat() - r.flat())) <= 1e-12
    assert gm.param_size_bits(p) == p.size * 32 == (4 * 6 + 4 + 2 * 4 + 2) * 32
    with pytest.raises(ConfigurationError):
        gm.param_l2_distance(p, gm.init_params(3, (5,), 2, np.random.default_rng(0)))


def test_forward_ignores_features_outside_closure():
    rng = np.random.default_rng(12)
    params = gm.init_params(3, (4, 3), 2, rng)
    h0 = rng.standard_normal((6, 3))
    # layer 1 computes nodes 0..3 from nodes 0..4; node 5 is outside every sample
    s1 = gm.LayerSpec.from_neighbor_lists([0, 1, 2, 3], [[1], [0, 2], [4], []], list(range(6)))
    s2 = gm.LayerSpec.from_neighbor_lists([0], [[1]], [0, 1, 2, 3])
    base = gm.forward(params, h0, [s1, s2]).h_last
    for node in (3, 5):  # 3 is computed but never consumed by node 0's layer-2 sample
        h0b = h0.copy()
        h0b[node] += 5.0
        assert np.array_equal(gm.forward(params, h0b, [s1, s2]).h_last, base)
    h0c = h0.copy()
    h0c[2] += 5.0  # inside the closure via node 1
    assert not np.array_equal(gm.forward(params, h0c, [s1, s2]).h_last, base)


def test_hyperparams_validation():
    with pytest.raises(ConfigurationError):
        gm.Hyperparams(lr=0.0)
    with pytest.raises(ConfigurationError):
        gm.Hyperparams(hidden_dims=())
