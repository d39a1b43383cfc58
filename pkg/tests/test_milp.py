import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tractnet import lp as lpmod
from tractnet.bounds import Box, propagate_ibp
from tractnet.gradcheck import random_case
from tractnet.milp import (
    MilpSpec,
    Node,
    branch,
    build_model,
    enumerate_oracle,
    mean_cvar_weights,
    result_row,
    solve_milp,
    write_rows,
)
from tractnet.network import Network


def relu_net():
    return Network([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])


def small_case(seed):
    return random_case(np.random.default_rng(seed), max_in=2, max_depth=2, max_width=5)


def test_relu_minimum_on_symmetric_box():
    res = solve_milp(MilpSpec(relu_net(), Box([-1.0], [1.0])))
    assert res.status == "optimal" and res.objective == pytest.approx(0.0, abs=1e-12)
    res = solve_milp(MilpSpec(relu_net(), Box([-1.0], [1.0]), sense="max"))
    assert res.objective == pytest.approx(1.0, abs=1e-12)


def test_affine_net_needs_only_root():
    net = Network([np.array([[1.0, -3.0]])], [np.array([0.5])])
    res = solve_milp(MilpSpec(net, Box([0.0, 0.0], [1.0, 1.0])))
    assert res.nodes <= 1 and res.objective == pytest.approx(-2.5) and res.root_lp_gap == pytest.approx(0.0, abs=1e-12)


def test_branch_rejects_integral_variable():
    node = Node(0, np.zeros(3), np.ones(3))
    with pytest.raises(RuntimeError):
        branch(node, 1, 1.0, itertools.count(1))
    lo, hi = branch(node, 1, 0.4, itertools.count(1))
    assert lo.ub[1] == 0.0 and hi.lb[1] == 1.0 and lo.depth == hi.depth == 1


def test_child_bounds_never_improve_on_parent():
    checked = 0
    for seed in range(100):
        net, box = small_case(seed)
        model = build_model(MilpSpec(net, box), propagate_ibp(net, box))
        sol = lpmod.solve_lp(model)
        frac = [v for v in model.integer_vars if 1e-6 < sol.y[v] < 1 - 1e-6]
        if not frac:
            continue
        for child in branch(Node(0, model.lb, model.ub), frac[0], sol.y[frac[0]], itertools.count(1)):
            c = lpmod.solve_lp(model, child.lb, child.ub)
            if c.optimal:
                assert c.value >= sol.value - 1e-9
                checked += 1
    assert checked >= 20


@settings(max_examples=40)
@given(seed=st.integers(0, 10**6), sense=st.sampled_from(["min", "max"]))
def test_matches_enumeration(seed, sense):
    net, box = small_case(seed)
    res = solve_milp(MilpSpec(net, box, sense=sense))
    ora = enumerate_oracle(net, box, sense=sense)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(ora.value, abs=1e-6)
    assert res.best_bound == pytest.approx(res.objective, abs=1e-6)
    # the reported point attains the reported value
    assert net(res.x)[0] == pytest.approx(res.objective, abs=1e-9)
    assert box.contains(res.x, 1e-12)
    if sense == "min":
        assert res.root_lp_value <= ora.value + 1e-9
    else:
        assert res.root_lp_value >= ora.value - 1e-9
    assert res.root_lp_gap >= -1e-9


@settings(max_examples=20)
@given(seed=st.integers(0, 10**6))
def test_fixing_stable_neurons_changes_nothing_but_size(seed):
    net, box = small_case(seed)
    a = solve_milp(MilpSpec(net, box))
    b = solve_milp(MilpSpec(net, box, fix_stable=False))
    assert a.objective == pytest.approx(b.objective, abs=1e-6)
    prof = propagate_ibp(net, box)
    assert len(build_model(MilpSpec(net, box), prof).a_vars) == len(prof.unstable)
    assert len(build_model(MilpSpec(net, box, fix_stable=False), prof).a_vars) == net.n_hidden


def test_deterministic():
    net, box = small_case(11)
    a, b = solve_milp(MilpSpec(net, box)), solve_milp(MilpSpec(net, box))
    assert a.objective == b.objective and a.nodes == b.nodes and a.history == b.history


def test_binary_inputs_against_exhaustive():
    rng = np.random.default_rng(5)
    net = Network.init([6, 8, 8, 2], seed=5)
    for b in net.biases:
        b += rng.normal(0, 0.3, b.shape)
    w = np.array([0.3, 0.7])
    cost = rng.normal(0, 0.2, 6)
    res = solve_milp(MilpSpec(net, Box.cube(6, 0, 1), objective=w, binary=True, input_cost=cost))
    best = min(w @ net(np.array(x, float)) + cost @ np.array(x, float) for x in itertools.product([0, 1], repeat=6))
    assert res.objective == pytest.approx(best, abs=1e-9)
    assert set(np.unique(res.x)) <= {0.0, 1.0}
    ora = enumerate_oracle(net, Box.cube(6, 0, 1), objective=w, binary=True, input_cost=cost)
    assert ora.value == pytest.approx(best, abs=1e-12) and ora.n_evaluated == 64


def test_limits_are_reported():
    net = Network.init([2, 30, 30, 1], seed=1)
    box = Box.cube(2, -3, 3)
    res = solve_milp(MilpSpec(net, box, time_limit=1e-9, heuristic_samples=0))
    assert res.status in ("time-limit", "optimal")
    if res.status == "time-limit":
        assert res.best_bound <= res.objective
    res = solve_milp(MilpSpec(net, box, node_limit=1, heuristic_samples=0))
    assert res.nodes == 1 and res.status in ("node-limit", "optimal")


def test_spec_validation():
    net = relu_net()
    with pytest.raises(ValueError):
        MilpSpec(net, Box([-1.0], [1.0]), sense="up")
    with pytest.raises(ValueError):
        MilpSpec(net, Box([-1.0], [1.0]), binary=True)
    with pytest.raises(ValueError):
        MilpSpec(net, Box.cube(2, 0, 1))
    with pytest.raises(ValueError):
        MilpSpec(net, Box([-1.0], [1.0]), time_limit=0)


def test_oracle_cap():
    net = Network.init([2, 40, 1], seed=0)
    with pytest.raises(ValueError):
        enumerate_oracle(net, Box.cube(2, -5, 5))


def test_mean_cvar_weights():
    taus = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    w = mean_cvar_weights(taus, 0.5, 0.7)
    assert w.sum() == pytest.approx(1.0)
    assert w.tolist() == pytest.approx([0.1, 0.1, 0.1, 0.35, 0.35])
    assert mean_cvar_weights(taus, 0.0, 0.99).tolist() == pytest.approx([0.2] * 5)
    with pytest.raises(ValueError):
        mean_cvar_weights(taus, 0.5, 0.95)


def test_result_rows_round_trip(tmp_path):
    res = solve_milp(MilpSpec(relu_net(), Box([-1.0], [1.0])))
    row = result_row(res, 0, "1-1-1", "none", 0.0, 1)
    assert float(row["root_lp_gap"]) == res.root_lp_gap and row["status"] == "optimal"
    path = tmp_path / "r.csv"
    write_rows(path, [row])
    assert path.read_text().splitlines()[0].startswith("schema_version")
