import numpy as np
import pytest
from hypothesis import given, strategies as st

from tractnet import autodiff as ad
from tractnet.bounds import Box, BoundsProfile, propagate_ibp, soundness_check, unstable_count
from tractnet.network import Network


def random_net(seed, max_in=5, max_depth=5, max_width=16):
    r = np.random.default_rng(seed)
    dims = [int(r.integers(1, max_in + 1))] + [int(r.integers(1, max_width + 1)) for _ in range(int(r.integers(1, max_depth + 1)))] + [1]
    net = Network.init(dims, seed=seed)
    c = r.uniform(-2, 2, dims[0])
    w = r.uniform(0, 2, dims[0])
    return net, Box(c - w, c + w)


def test_box_validation():
    with pytest.raises(ValueError):
        Box([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        Box([0.0], [1.0, 2.0])


def test_zero_weights_give_bias():
    net = Network([np.zeros((2, 3)), np.zeros((1, 2))], [np.array([0.5, -1.0]), np.array([2.0])])
    p = propagate_ibp(net, Box.cube(3, -1, 1))
    assert p.lower[1].tolist() == p.upper[1].tolist() == [0.5, -1.0]


def test_hand_interval():
    net = Network([np.array([[1.0, -1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    p = propagate_ibp(net, Box.cube(2, -1, 1))
    assert (p.lower[1][0], p.upper[1][0]) == (-2.0, 2.0)
    # the sampling oracle attains both extremes at the corners
    corners = np.array([[1, -1], [-1, 1]], dtype=float)
    z = corners @ net.weights[0].T
    assert z.min() == -2.0 and z.max() == 2.0


def test_two_layer_chain():
    net = Network([np.array([[1.0]]), np.array([[1.0]])], [np.array([-0.5]), np.array([0.0])])
    p = propagate_ibp(net, Box([0.0], [1.0]))
    assert (p.lower[1][0], p.upper[1][0]) == (-0.5, 0.5)
    assert (p.post_lower[1][0], p.post_upper[1][0]) == (0.0, 0.5)
    assert (p.lower[2][0], p.upper[2][0]) == (0.0, 0.5)
    grid = np.linspace(0, 1, 1001)
    z2 = np.maximum(grid - 0.5, 0.0)
    assert z2.min() == 0.0 and z2.max() == 0.5


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        propagate_ibp(Network.init([2, 3, 1]), Box.cube(3, 0, 1))


def _profile(L, U):
    L, U = np.asarray(L, float), np.asarray(U, float)
    return BoundsProfile([None, L, np.zeros(1)], [None, U, np.zeros(1)], [None, np.maximum(L, 0)], [None, np.maximum(U, 0)])


def test_unstable_count_examples():
    assert unstable_count(_profile([0.0, 1.0], [1.0, 2.0]))[0] == 0
    assert unstable_count(_profile([-1.0, 0.1], [1.0, 2.0])) == (1, [(1, 0)])
    assert unstable_count(_profile([0.0, -1.0], [1.0, 0.0]))[0] == 0


def test_output_layer_never_unstable():
    net = Network([np.array([[1.0]])], [np.array([0.0])])
    p = propagate_ibp(net, Box([-1.0], [1.0]))
    assert p.lower[1][0] < 0 < p.upper[1][0] and p.unstable == []


@pytest.mark.parametrize("seed", range(50))
def test_soundness_sampled(seed):
    net, box = random_net(seed)
    rep = soundness_check(net, box, propagate_ibp(net, box), n_samples=200, seed=seed)
    assert rep.ok and rep.max_violation == 0.0


def test_corrupted_profile_is_detected():
    net, box = random_net(3)
    p = propagate_ibp(net, box)
    p.upper[1] = p.upper[1] - 0.5 * (p.upper[1] - p.lower[1]) - 1e-3
    rep = soundness_check(net, box, p, n_samples=200, seed=0)
    assert not rep.ok and rep.max_violation > 0 and rep.worst[0] == 1


@given(seed=st.integers(0, 10**6))
def test_width_recursion(seed):
    net, box = random_net(seed)
    p = propagate_ibp(net, box)
    for l in range(1, len(net.weights) + 1):
        d_post = p.post_upper[l - 1] - p.post_lower[l - 1]
        assert np.allclose(p.upper[l] - p.lower[l], np.abs(net.weights[l - 1]) @ d_post, rtol=0, atol=1e-12 * (1 + np.abs(p.upper[l]).max()))


@given(seed=st.integers(0, 10**6), grow=st.floats(0.0, 1.0))
def test_enlarging_box_is_monotone(seed, grow):
    net, box = random_net(seed)
    big = Box(box.lb - grow, box.ub + grow)
    p, q = propagate_ibp(net, box), propagate_ibp(net, big)
    for l in range(1, len(net.weights) + 1):
        assert np.all(q.lower[l] <= p.lower[l] + 1e-12) and np.all(q.upper[l] >= p.upper[l] - 1e-12)


@given(seed=st.integers(0, 10**6))
def test_post_clamp_and_order(seed):
    net, box = random_net(seed)
    p = propagate_ibp(net, box)
    for l in range(1, p.n_hidden_layers + 1):
        assert np.all(p.lower[l] <= p.upper[l])
        assert np.array_equal(p.post_lower[l], np.maximum(p.lower[l], 0))
        assert np.array_equal(p.post_upper[l], np.maximum(p.upper[l], 0))
        for j in range(len(p.lower[l])):
            assert p.is_unstable(l, j) == (p.lower[l][j] < 0 < p.upper[l][j])


def test_tape_bounds_match_numpy_and_differentiate():
    net, box = random_net(11, max_depth=3, max_width=6)
    tape = ad.Tape()
    tn = net.bind(tape)
    p = propagate_ibp(net, box, tn)
    for l in range(1, len(net.weights) + 1):
        assert np.array_equal(p.lower_vars[l].value.ravel(), p.lower[l])
        assert np.array_equal(p.upper_vars[l].value.ravel(), p.upper[l])
    total = None
    for l in range(1, len(net.weights) + 1):
        w = ad.sum_(ad.sub(p.upper_vars[l], p.lower_vars[l]))
        total = w if total is None else ad.add(total, w)
    grads = tn.grads_to_arrays(ad.gradient(tape, total, tn.params))

    def width_sum():
        q = propagate_ibp(net, box)
        return sum(float(np.sum(q.upper[l] - q.lower[l])) for l in range(1, len(net.weights) + 1))

    eps = 1e-5
    for W, g in zip(net.weights, grads[::2]):
        for idx in np.ndindex(W.shape):
            if abs(W[idx]) < 1e-4:
                continue
            o = W[idx]
            W[idx] = o + eps
            up = width_sum()
            W[idx] = o - eps
            dn = width_sum()
            W[idx] = o
            fd = (up - dn) / (2 * eps)
            assert abs(fd - g[idx]) <= 1e-4 * max(1.0, abs(fd))
