import numpy as np
import pytest

from tractnet import data as datamod
from tractnet.bounds import Box, propagate_ibp, unstable_count
from tractnet.regularizers import RegularizerConfig
from tractnet.trainer import TrainConfig, TrainingError, evaluate, train


def linear_data(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    Y = 0.5 * X[:, :1] - 0.3 * X[:, 1:] + 0.1
    box = Box([-1.0, -1.0], [1.0, 1.0])
    cut = int(0.7 * n)
    return datamod.Dataset(X[:cut], Y[:cut], box=box), datamod.Dataset(X[cut:], Y[cut:], box=box)


def test_fits_a_linear_function():
    tr, te = linear_data()
    cfg = TrainConfig(dims=[2, 16, 1], epochs=40, lr=1e-2, seed=0)
    net, rep = train(cfg, tr, te)
    assert rep.test_loss < 1e-3
    assert rep.epoch_loss[-1] < rep.epoch_loss[0]


def test_strong_width_penalty_shrinks_bounds():
    tr, te = linear_data()
    cfg = TrainConfig(dims=[2, 16, 16, 1], epochs=15, seed=0, reg=RegularizerConfig(bw=10.0))
    _, rep = train(cfg, tr, te)
    assert rep.epoch_width[-1] < rep.epoch_width[0]


def test_same_seed_same_metrics():
    tr, te = linear_data(500)
    cfg = TrainConfig(dims=[2, 8, 1], epochs=3, seed=3, reg=RegularizerConfig(bw=1e-3, sn=1e-3))
    (n1, r1), (n2, r2) = train(cfg, tr, te), train(cfg, tr, te)
    assert r1.metrics() == r2.metrics() and n1 == n2


def test_zero_weights_match_unregularized_bitwise():
    tr, te = linear_data(500)
    base = TrainConfig(dims=[2, 8, 8, 1], epochs=3, seed=1)
    zero = TrainConfig(dims=[2, 8, 8, 1], epochs=3, seed=1, reg=RegularizerConfig(l1=0.0, bw=0.0, lp=0.0))
    (a, ra), (b, rb) = train(base, tr, te), train(zero, tr, te)
    assert a == b and ra.metrics() == rb.metrics()


def test_reported_unstable_count_matches_final_net():
    tr, te = linear_data(500)
    net, rep = train(TrainConfig(dims=[2, 10, 10, 1], epochs=2, seed=2), tr, te)
    n, _ = unstable_count(propagate_ibp(net, tr.box))
    assert rep.unstable == n == rep.epoch_unstable[-1]


def test_lp_gap_training_runs():
    tr, te = linear_data(256)
    cfg = TrainConfig(dims=[2, 6, 1], epochs=1, seed=0, reg=RegularizerConfig(lp=1e-2, lp_direction="both"))
    _, rep = train(cfg, tr, te)
    assert np.isfinite(rep.test_loss)


def test_pinball_training():
    cfg = TrainConfig(
        dims=[4, 16, 3], epochs=10, seed=0, mode="pinball", benchmark="synth-quantile", n_samples=2000, n_quantiles=3
    )
    net, rep = train(cfg)
    assert np.isfinite(rep.test_loss) and rep.epoch_loss[-1] < rep.epoch_loss[0]


def test_evaluate_constant_predictor_is_variance():
    from tractnet.network import Network

    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(200, 2)), rng.normal(size=(200, 1))
    net = Network([np.zeros((1, 2))], [np.array([Y.mean()])])
    assert evaluate(net, datamod.Dataset(X, Y)) == pytest.approx(Y.var(), rel=1e-12)


def test_true_quantiles_beat_mean_in_pinball():
    ds = datamod.synth_quantile_data(4000, 4, 3, seed=0)
    truth = ds.meta["truth"]
    from tractnet.network import pinball_np

    q = truth.quantiles(ds.X, ds.taus)
    mean = np.repeat(truth.mean(ds.X)[:, None], 3, axis=1)
    assert pinball_np(q, ds.Y[:, 0], ds.taus) < pinball_np(mean, ds.Y[:, 0], ds.taus)


def test_nan_guard_names_the_term():
    tr, te = linear_data(200)
    tr.Y[0, 0] = np.nan
    with pytest.raises(TrainingError, match="data.*epoch 1"):
        train(TrainConfig(dims=[2, 4, 1], epochs=1, seed=0), tr, te)


def test_shape_checks():
    tr, te = linear_data(100)
    with pytest.raises(ValueError):
        train(TrainConfig(dims=[3, 4, 1], epochs=1), tr, te)
    with pytest.raises(ValueError):
        TrainConfig(dims=[2, 0, 1])
    with pytest.raises(ValueError):
        TrainConfig(dims=[2, 4, 1], mode="huber")
