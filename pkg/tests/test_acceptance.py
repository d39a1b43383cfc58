"""End-to-end acceptance checks.  Each test records one PASS/FAIL line."""
import time

import numpy as np
import pytest

from tractnet import autodiff as ad
from tractnet import data as datamod
from tractnet import lp as lpmod
from tractnet.bounds import Box, propagate_ibp, soundness_check
from tractnet.experiments import trend_experiment
from tractnet.gradcheck import check_lp_duals, check_regularizers, random_case
from tractnet.milp import MilpSpec, enumerate_oracle, mean_cvar_weights, solve_milp
from tractnet.network import Network, mse_loss, pinball_np
from tractnet.regularizers import LPGapDetails, RegularizerConfig, reg_lp, total_loss
from tractnet.trainer import TrainConfig, make_dataset, train


# ----------------------------------------------------------- independent oracles


def forward_grads(net, x):
    """d f / d theta for a scalar-output net by hand-written backprop (W1, b1, ... order)."""
    hs, zs = [np.asarray(x, float)], []
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = W @ hs[-1] + b
        zs.append(z)
        hs.append(np.maximum(z, 0.0) if l < len(net.weights) - 1 else z)
    g = np.ones(1)
    out = []
    for l in range(len(net.weights) - 1, -1, -1):
        out = [np.outer(g, hs[l]), g.copy()] + out
        if l:
            g = (net.weights[l].T @ g) * (zs[l - 1] > 0)
    return out


def dual_channel(net, prof, x, sense="min"):
    """Gradient of the pointwise gap assembled from the solver's duals and primal xhat*."""
    model = lpmod.build_fixed_input_lp(net, prof, x, None, sense)
    sol = lpmod.solve_lp(model)
    nu = lpmod.layer_duals(model, sol)
    xs = lpmod.post_activation_values(model, sol)
    df = forward_grads(net, x)
    sgn = 1.0 if sense == "min" else -1.0
    g = []
    for l in range(1, len(net.weights) + 1):
        dVW, dVb = np.outer(nu[l], xs[l - 1]), nu[l]
        g += [sgn * (df[2 * l - 2] - dVW), sgn * (df[2 * l - 1] - dVb)]
    return g


def ibp_width_tangent(net, box, p, i):
    """Forward-mode derivative of sum over hidden neurons of (U - L) w.r.t. one parameter entry."""
    params = net.params()
    tang = [np.zeros_like(q) for q in params]
    tang[p].reshape(-1)[i] = 1.0
    lo, hi = box.lb.astype(float), box.ub.astype(float)
    dlo, dhi = np.zeros_like(lo), np.zeros_like(hi)
    total = 0.0
    for l in range(len(net.weights) - 1):
        W, b, dW, db = params[2 * l], params[2 * l + 1], tang[2 * l], tang[2 * l + 1]
        c, r, dc, dr = (lo + hi) / 2, (hi - lo) / 2, (dlo + dhi) / 2, (dhi - dlo) / 2
        zc, dzc = W @ c + b, dW @ c + W @ dc + db
        rad, drad = np.abs(W) @ r, (np.sign(W) * dW) @ r + np.abs(W) @ dr
        L, U, dL, dU = zc - rad, zc + rad, dzc - drad, dzc + drad
        total += float(np.sum(dU - dL))
        lo, hi, dlo, dhi = np.maximum(L, 0), np.maximum(U, 0), dL * (L > 0), dU * (U > 0)
    return total


def fixed_243():
    net = Network.init([2, 4, 4, 1], seed=3)
    rng = np.random.default_rng(3)
    for b in net.biases:
        b += rng.normal(0, 0.3, b.shape)
    box = Box([-1.0, -1.0], [1.0, 1.0])
    return net, box, box.sample(6, rng)


# ------------------------------------------------------------------- criteria


def test_c01_ibp_soundness(criterion):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    violations, worst = 0, 0.0
    for i in range(1000):
        d0 = int(rng.integers(1, 6))
        dims = [d0] + [int(rng.integers(1, 17)) for _ in range(int(rng.integers(1, 6)))] + [int(rng.integers(1, 4))]
        net = Network.init(dims, seed=i)
        c, r = rng.uniform(-2, 2, d0), rng.uniform(0.01, 2, d0)
        box = Box(c - r, c + r)
        rep = soundness_check(net, box, propagate_ibp(net, box), n_samples=100, seed=i)
        violations += rep.n_violations
        worst = max(worst, rep.max_violation)
    dt = time.perf_counter() - t0
    ok = criterion(1, violations == 0 and dt < 30, f"violations={violations} max={worst:.2e} time={dt:.1f}s")
    assert ok


def test_c02_regularizer_gradients(criterion):
    t0 = time.perf_counter()
    rep = check_regularizers(seed=0, n_nets=50, eps=1e-5, rtol=1e-4)
    dt = time.perf_counter() - t0
    worst = max(rep.max_rel.values())
    checked = sum(rep.checked.values())
    ok = criterion(2, rep.ok and dt < 60, f"checked={checked} max_rel_err={worst:.2e} time={dt:.1f}s")
    assert ok, [str(f) for f in rep.failures[:5]]


def test_c03_dual_gradient(criterion):
    t0 = time.perf_counter()
    rep = check_lp_duals(seed=0, n_cases=100, n_probe=5, eps=1e-5, tol=1e-3)
    dt = time.perf_counter() - t0
    ok = rep.ok and rep.cases >= 100 and dt < 120
    ok = criterion(
        3, ok, f"cases={rep.cases} probes={rep.probes} non-degenerate={rep.nondegenerate_fraction:.1%} "
        f"max_err={rep.max_err:.2e} time={dt:.1f}s"
    )
    assert ok


def test_c04_straight_through(criterion):
    worst_fwd, worst_bwd = 0.0, 0.0
    exact = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net, box = random_case(rng, max_in=3, max_depth=3, max_width=6)
        X = box.sample(4, rng)
        for sense in ("min", "max"):
            tape = ad.Tape()
            tnet = net.bind(tape)
            prof = propagate_ibp(net, box, tnet)
            det = LPGapDetails()
            out = reg_lp(tnet, prof, X, RegularizerConfig(lp=1.0, lp_direction=sense), rng, det)
            solver_mean = float(np.mean([o - v if s == "min" else v - o for o, v, s in
                                         zip(det.outputs, det.values, det.senses)]))
            exact &= out.item() == solver_mean
            worst_fwd = max(worst_fwd, abs(out.item() - solver_mean))
            got = tnet.grads_to_arrays(ad.gradient(tape, out, tnet.params))
            parts = [dual_channel(net, prof, x, sense) for x in X]
            for k, g in enumerate(got):
                want = np.mean([p[k] for p in parts], axis=0)
                worst_bwd = max(worst_bwd, float(np.max(np.abs(g - want))))
    ok = criterion(4, exact and worst_bwd <= 1e-12, f"forward bit-exact={exact} max_backward_err={worst_bwd:.1e}")
    assert ok


def test_c05_gap_nonnegative(criterion):
    rng = np.random.default_rng(5)
    worst, worst_stable, n_stable = np.inf, 0.0, 0
    for _ in range(1000):
        net, box = random_case(rng, max_in=4, max_depth=4, max_width=8)
        prof = propagate_ibp(net, box)
        x = box.sample(1, rng)[0]
        sol = lpmod.solve_lp(lpmod.build_fixed_input_lp(net, prof, x))
        gap = float(net(x)[0]) - sol.value
        worst = min(worst, gap)
        if not prof.unstable:
            n_stable += 1
            worst_stable = max(worst_stable, abs(gap))
    ok = worst >= -1e-9 and worst_stable <= 1e-9
    ok = criterion(5, ok, f"min_gap={worst:.2e} all-stable cases={n_stable} max|gap|={worst_stable:.1e}")
    assert ok


def test_c06_milp_oracle(criterion):
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    n, mismatches, order_bad, worst = 0, 0, 0, 0.0
    while n < 200:
        net, box = random_case(rng, max_in=3, max_depth=3, max_width=8)
        prof = propagate_ibp(net, box)
        if len(prof.unstable) > 12:
            continue
        n += 1
        for sense in ("min", "max"):
            res = solve_milp(MilpSpec(net, box, sense=sense, seed=n), prof)
            ora = enumerate_oracle(net, box, sense=sense, profile=prof)
            err = abs(res.objective - ora.value)
            worst = max(worst, err)
            mismatches += res.status != "optimal" or err > 1e-6
            sgn = 1.0 if sense == "min" else -1.0
            # root bound <= optimum <= incumbent, in minimisation form
            if sgn * res.root_lp_value > sgn * ora.value + 1e-9 or sgn * res.objective < sgn * ora.value - 1e-6:
                order_bad += 1
            if sgn * res.best_bound > sgn * res.objective + 1e-9:
                order_bad += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and order_bad == 0 and dt < 300
    ok = criterion(6, ok, f"nets={n} mismatches={mismatches} ordering violations={order_bad} "
                   f"max_err={worst:.1e} time={dt:.1f}s")
    assert ok


def test_c07_decomposition(criterion):
    net, box, X = fixed_243()
    alpha = 0.7
    Y = np.zeros((len(X), 1))
    tape = ad.Tape()
    tnet = net.bind(tape)
    prof = propagate_ibp(net, box, tnet)
    cfg = RegularizerConfig(lp=1.0, alpha=alpha, lp_samples=len(X))
    tot, _ = total_loss(tnet, X, Y, prof, cfg)
    g_tot = tnet.grads_to_arrays(ad.gradient(tape, tot, tnet.params))
    tape2 = ad.Tape()
    tnet2 = net.bind(tape2)
    g_data = tnet2.grads_to_arrays(ad.gradient(tape2, mse_loss(tnet2, X, Y), tnet2.params))
    composed = [a - b for a, b in zip(g_tot, g_data)]

    plain = propagate_ibp(net, box)
    n_unstable = len(plain.unstable)
    parts = [dual_channel(net, plain, x) for x in X]
    worst = 0.0
    for k, q in enumerate(net.params()):
        direct = np.mean([p[k] for p in parts], axis=0).reshape(-1)
        width = np.array([ibp_width_tangent(net, box, k, i) for i in range(q.size)]) / net.n_hidden
        want = direct + alpha * width
        worst = max(worst, float(np.max(np.abs(composed[k].reshape(-1) - want))))
    ok = criterion(7, worst <= 1e-10 and n_unstable > 0, f"|U|={n_unstable} max_err={worst:.1e}")
    assert ok


def test_c08_benchmark_anchors(criterion):
    g = np.linspace(-5, 5, 1001)
    G = np.stack(np.meshgrid(g, g), -1)
    h = datamod.himmelblau(G).min()
    g = np.linspace(-2, 2, 4001)
    G = np.stack(np.meshgrid(g, g), -1)
    p = datamod.peaks(G).min()
    g = np.linspace(-3.5, 3.5, 701)
    G = np.stack(np.meshgrid(g, g), -1)
    A = datamod.ackley(G)
    a_min, a_at = A.min(), np.unravel_index(np.argmin(A), A.shape)
    ok = abs(h) <= 1e-9 and abs(p + 6.551) <= 1e-2 and abs(a_min) <= 1e-12 and a_at == (350, 350)
    ok = criterion(8, ok, f"himmelblau={h:.2e} peaks={p:.4f} ackley={a_min:.1e} at origin={a_at == (350, 350)}")
    assert ok


def test_c09_trend(criterion):
    t0 = time.perf_counter()
    res = trend_experiment("peaks", (2, 25, 25, 1), lam=1e-3, seeds=(0, 1, 2), n_samples=20000, epochs=50)
    dt = time.perf_counter() - t0
    b, r = res["none"], res["bw"]
    du = 1 - r["unstable"] / b["unstable"]
    dg = 1 - r["root_lp_gap"] / b["root_lp_gap"]
    mse = r["test_mse"] / b["test_mse"]
    ok = du >= 0.30 and dg >= 0.50 and mse <= 3.0 and dt < 600
    ok = criterion(
        9, ok, f"|U| {b['unstable']:.1f}->{r['unstable']:.1f} ({du:.0%} lower), gap {b['root_lp_gap']:.2f}->"
        f"{r['root_lp_gap']:.2f} ({dg:.0%} lower), mse ratio {mse:.2f}, time={dt:.0f}s"
    )
    assert ok


def test_c10_zero_weight_neutrality(criterion):
    rng = np.random.default_rng(10)
    X = rng.uniform(-1, 1, (512, 2))
    Y = np.sin(3 * X[:, :1]) * X[:, 1:]
    box = Box([-1.0, -1.0], [1.0, 1.0])
    tr, te = datamod.Dataset(X[:400], Y[:400], box=box), datamod.Dataset(X[400:], Y[400:], box=box)
    base_net, base = train(TrainConfig(dims=[2, 8, 8, 1], epochs=3, seed=4), tr, te)
    same = []
    for name in ("l1", "l2", "bw", "sn", "sn2", "lp"):
        net, rep = train(TrainConfig(dims=[2, 8, 8, 1], epochs=3, seed=4, reg=RegularizerConfig.single(name, 0.0)), tr, te)
        same.append(net == base_net and rep.epoch_loss == base.epoch_loss and rep.metrics() == base.metrics())
    ok = criterion(10, all(same), f"bit-identical for {sum(same)}/6 regularizers")
    assert ok


def test_c11_quantile_mode(criterion):
    t0 = time.perf_counter()
    K = 5
    cfg = TrainConfig(dims=[8, 16, K], epochs=50, seed=0, mode="pinball", benchmark="synth-quantile",
                      n_samples=20000, n_quantiles=K)
    tr, te = make_dataset(cfg)
    net, rep = train(cfg, tr, te)
    s = te.stats
    truth_q = (te.meta["truth"].quantiles(te.X, te.taus) - s.y_mean) / s.y_std
    opt = pinball_np(truth_q, te.Y[:, 0], te.taus)
    ratio = rep.test_loss / opt

    w = mean_cvar_weights(te.taus, 0.5, 0.7)
    box = Box.cube(8, 0, 1)
    errs = []
    for sense in ("min", "max"):
        res = solve_milp(MilpSpec(net, box, objective=w, sense=sense, binary=True))
        X = ((np.arange(256)[:, None] >> np.arange(8)) & 1).astype(float)
        vals = net.predict(X) @ w
        best = vals.min() if sense == "min" else vals.max()
        errs.append(abs(res.objective - best))
    dt = time.perf_counter() - t0
    ok = ratio <= 1.2 and max(errs) <= 1e-6 and dt < 300
    ok = criterion(11, ok, f"pinball/optimum={ratio:.3f} milp_vs_256={max(errs):.1e} time={dt:.1f}s")
    assert ok
