"""Exact optimisation of a trained ReLU network by LP-based branch-and-bound.

The tree branches on the relaxed activation indicators ``a`` of unstable
neurons (and on binary inputs, when flagged).  Node selection is best-bound
first with ties broken by node id; the branching variable is the most
fractional one with ties broken by (layer, neuron).  Each node LP is solved
from scratch.  The node count is the number of LPs solved in the tree,
the root included.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import lp as lpmod
from .bounds import Box, BoundsProfile, propagate_ibp
from .network import Network

INT_TOL = 1e-6
GAP_TOL = 1e-6
ORACLE_CAP = 16
SCHEMA_VERSION = 1
RESULT_FIELDS = [
    "schema_version",
    "seed",
    "arch",
    "regularizer",
    "lambda",
    "unstable",
    "root_lp_gap",
    "nodes",
    "time_s",
    "objective",
    "status",
]


@dataclass
class MilpSpec:
    net: Network
    box: Box
    objective: object = None  # None (single output) | output index | weight vector
    sense: str = "min"
    binary: object = False  # bool, or one flag per input
    input_cost: np.ndarray | None = None
    time_limit: float = float("inf")
    node_limit: int | None = None
    int_tol: float = INT_TOL
    gap_tol: float = GAP_TOL
    fix_stable: bool = True
    heuristic_samples: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.sense not in ("min", "max"):
            raise ValueError(f"sense must be 'min' or 'max', got {self.sense!r}")
        if not self.time_limit > 0:
            raise ValueError("time limit must be positive")
        if self.node_limit is not None and self.node_limit < 1:
            raise ValueError("node limit must be positive")
        if self.box.dim != self.net.dims[0]:
            raise ValueError("box dimension does not match the network input")
        mask = np.broadcast_to(np.asarray(self.binary, dtype=bool), (self.box.dim,)).copy()
        if np.any(mask & ((self.box.lb != 0.0) | (self.box.ub != 1.0))):
            raise ValueError("binary inputs need a [0, 1] box")
        self.binary = mask
        self.weights = lpmod._objective_weights(self.objective, self.net.dims[-1])
        if self.input_cost is not None:
            self.input_cost = np.asarray(self.input_cost, dtype=np.float64).reshape(-1)
            if self.input_cost.shape[0] != self.box.dim or not np.all(np.isfinite(self.input_cost)):
                raise ValueError("input cost must have one finite entry per input")

    def evaluate(self, x) -> float:
        """True objective at input ``x``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        v = float(self.weights @ self.net(x))
        if self.input_cost is not None:
            v += float(self.input_cost @ x)
        return v


@dataclass
class MilpResult:
    status: str  # optimal | time-limit | node-limit
    objective: float
    x: np.ndarray
    best_bound: float
    nodes: int
    root_lp_value: float
    root_lp_gap: float
    time_s: float
    sense: str = "min"
    history: list = field(default_factory=list)  # (node id, lp bound) in solve order


class _Unfixed(BoundsProfile):
    """Profile view that reports every hidden neuron as unstable."""

    def status(self, l, j):
        return "unstable"


def build_model(spec: MilpSpec, profile: BoundsProfile) -> lpmod.LPModel:
    prof = profile
    if not spec.fix_stable:
        prof = _Unfixed(profile.lower, profile.upper, profile.post_lower, profile.post_upper, box=profile.box)
    model = lpmod.build_box_input_lp(spec.net, prof, spec.box, spec.objective, spec.sense, spec.input_cost)
    model.integer_vars = [model.input_vars[k] for k in np.flatnonzero(spec.binary)] + list(model.a_vars.values())
    return model


@dataclass
class Node:
    id: int
    lb: np.ndarray
    ub: np.ndarray
    depth: int = 0


def branch(node: Node, var: int, value: float, ids, int_tol: float = INT_TOL) -> tuple[Node, Node]:
    """Children fixing ``var`` to 0 and to 1.

    Fixing an indicator collapses its big-M rows: ``a = 0`` leaves
    ``xhat = 0, z <= 0`` and ``a = 1`` leaves ``xhat = z >= 0``.
    """
    if min(value - np.floor(value), np.ceil(value) - value) <= int_tol:
        raise RuntimeError(f"branching on integral variable {var} (value {value})")
    lo_ub = node.ub.copy()
    lo_ub[var] = 0.0
    hi_lb = node.lb.copy()
    hi_lb[var] = 1.0
    return Node(next(ids), node.lb, lo_ub, node.depth + 1), Node(next(ids), hi_lb, node.ub, node.depth + 1)


def incumbent_from_lp(spec: MilpSpec, model: lpmod.LPModel, sol: lpmod.LPSolution) -> tuple[float, np.ndarray]:
    """Forward-pass value at the LP's input, projected into the box (rounded where binary)."""
    x = np.clip(sol.y[model.input_vars], spec.box.lb, spec.box.ub)
    x = np.where(spec.binary, np.round(x), x)
    return spec.evaluate(x), x


def _pick_branch_var(model, y, int_tol):
    best, best_score = None, None
    for v in model.integer_vars:  # inputs first, then (layer, neuron) order
        frac = y[v] - np.floor(y[v])
        if min(frac, 1.0 - frac) <= int_tol:
            continue
        score = abs(frac - 0.5)
        if best is None or score < best_score:
            best, best_score = v, score
    return best


def _sample_incumbent(spec: MilpSpec):
    rng = np.random.default_rng(spec.seed)
    n = spec.heuristic_samples
    cand = [0.5 * (spec.box.lb + spec.box.ub)]
    if n > 0:
        X = spec.box.sample(n, rng)
        cand.extend(X)
    best_v, best_x = None, None
    sgn = 1.0 if spec.sense == "min" else -1.0
    for x in cand:
        x = np.where(spec.binary, np.round(x), x)
        v = sgn * spec.evaluate(x)
        if best_v is None or v < best_v:
            best_v, best_x = v, x
    return best_v, best_x


def solve_milp(spec: MilpSpec, profile: BoundsProfile | None = None) -> MilpResult:
    """Best-bound branch-and-bound.  All internal values are in minimisation form."""
    t0 = time.perf_counter()
    if profile is None:
        profile = propagate_ibp(spec.net, spec.box)
    model = build_model(spec, profile)
    sgn = 1.0 if spec.sense == "min" else -1.0
    ids = itertools.count()

    inc_v, inc_x = _sample_incumbent(spec)
    root = Node(next(ids), model.lb.copy(), model.ub.copy())
    sol = lpmod.solve_lp(model, root.lb, root.ub)
    nodes = 1
    if not sol.optimal:
        raise lpmod.LPError(f"root relaxation returned {sol.status}")
    root_v = sgn * sol.value
    history = [(root.id, root_v)]
    heap = []

    def process(node, sol):
        nonlocal inc_v, inc_x
        bound = sgn * sol.value
        v, x = incumbent_from_lp(spec, model, sol)
        if sgn * v < inc_v:
            inc_v, inc_x = sgn * v, x
        if bound >= inc_v - spec.gap_tol:
            return
        var = _pick_branch_var(model, sol.y, spec.int_tol)
        if var is None:
            # integral LP point: big-M is exact, so the forward value above is this node's optimum
            return
        heapq.heappush(heap, (bound, node.id, node, var, float(sol.y[var])))

    process(root, sol)
    status = "optimal"
    while heap:
        if time.perf_counter() - t0 > spec.time_limit:
            status = "time-limit"
            break
        if spec.node_limit is not None and nodes >= spec.node_limit:
            status = "node-limit"
            break
        bound, _, node, var, val = heapq.heappop(heap)
        if bound >= inc_v - spec.gap_tol:
            continue
        for child in branch(node, var, val, ids, spec.int_tol):
            csol = lpmod.solve_lp(model, child.lb, child.ub)
            nodes += 1
            if csol.status == "infeasible":
                continue
            if not csol.optimal:
                raise lpmod.LPError(f"node relaxation returned {csol.status}")
            history.append((child.id, sgn * csol.value))
            process(child, csol)

    # the tree is closed once every open node is within gap_tol of the incumbent
    open_bounds = [h[0] for h in heap if h[0] < inc_v - spec.gap_tol]
    best = min([inc_v] + open_bounds)
    return MilpResult(
        status=status,
        objective=sgn * inc_v,
        x=inc_x,
        best_bound=sgn * best,
        nodes=nodes,
        root_lp_value=sgn * root_v,
        root_lp_gap=inc_v - root_v,
        time_s=time.perf_counter() - t0,
        sense=spec.sense,
        history=history,
    )


# ------------------------------------------------------------------- oracle


@dataclass
class OracleResult:
    value: float
    x: np.ndarray
    n_evaluated: int


def _pattern_maps(net: Network, active: list):
    """Affine maps ``z_l = A_l x + c_l`` for a fixed activation pattern."""
    A = np.eye(net.dims[0])
    c = np.zeros(net.dims[0])
    maps = []
    for l, (W, b) in enumerate(zip(net.weights, net.biases), start=1):
        Az, cz = W @ A, W @ c + b
        maps.append((Az, cz))
        if l <= net.n_hidden_layers:
            m = active[l - 1].astype(np.float64)
            A, c = Az * m[:, None], cz * m
    return maps


def enumerate_oracle(
    net: Network,
    box: Box,
    objective=None,
    sense: str = "min",
    binary: bool = False,
    input_cost=None,
    profile: BoundsProfile | None = None,
) -> OracleResult:
    """Exact optimum by enumeration, independent of the simplex code.

    Box inputs: one HiGHS LP in ``x`` per assignment of the unstable
    indicators.  Binary inputs: every input vector through the forward pass.
    """
    w = lpmod._objective_weights(objective, net.dims[-1])
    ic = np.zeros(net.dims[0]) if input_cost is None else np.asarray(input_cost, dtype=np.float64).reshape(-1)
    sgn = 1.0 if sense == "min" else -1.0
    if binary:
        n0 = net.dims[0]
        if n0 > ORACLE_CAP:
            raise ValueError(f"binary enumeration capped at {ORACLE_CAP} inputs, got {n0}")
        X = np.array(list(itertools.product([0.0, 1.0], repeat=n0)))
        vals = net.predict(X) @ w + X @ ic
        i = int(np.argmin(sgn * vals))
        return OracleResult(float(vals[i]), X[i], X.shape[0])

    if profile is None:
        profile = propagate_ibp(net, box)
    U = profile.unstable
    if len(U) > ORACLE_CAP:
        raise ValueError(f"enumeration capped at {ORACLE_CAP} unstable neurons, got {len(U)}")
    base = [profile.lower[l] >= 0.0 for l in range(1, net.n_hidden_layers + 1)]
    best_v, best_x, n = None, None, 0
    for bits in itertools.product([False, True], repeat=len(U)):
        active = [m.copy() for m in base]
        for (l, j), on in zip(U, bits):
            active[l - 1][j] = on
        maps = _pattern_maps(net, active)
        rows, rhs = [], []
        for l in range(net.n_hidden_layers):
            Az, cz = maps[l]
            s = np.where(active[l], -1.0, 1.0)  # active: -z <= 0, inactive: z <= 0
            rows.append(s[:, None] * Az)
            rhs.append(-s * cz)
        Aout, cout = maps[-1]
        cost = sgn * (w @ Aout + ic)
        A_ub = np.vstack(rows) if rows else None
        b_ub = np.concatenate(rhs) if rhs else None
        res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=list(zip(box.lb, box.ub)), method="highs")
        n += 1
        if res.status != 0:
            continue
        v = float(res.fun) + sgn * float(w @ cout)
        if best_v is None or v < best_v:
            best_v, best_x = v, np.asarray(res.x)
    return OracleResult(sgn * best_v, best_x, n)


# ------------------------------------------------------------------ helpers


def mean_cvar_weights(taus, lam: float, alpha: float) -> np.ndarray:
    """Output weights ``(1 - lam)/K`` on every quantile plus ``lam/|T|`` on the tail ``tau >= alpha``."""
    taus = np.asarray(taus, dtype=np.float64)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    tail = taus >= alpha
    w = np.full(taus.shape[0], (1.0 - lam) / taus.shape[0])
    if lam > 0:
        if not tail.any():
            raise ValueError(f"no quantile level at or above alpha={alpha}")
        w[tail] += lam / tail.sum()
    return w


def result_row(res: MilpResult | None, seed, arch, regularizer, lam, unstable, status: str | None = None) -> dict:
    row = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "arch": arch,
        "regularizer": regularizer,
        "lambda": lam,
        "unstable": unstable,
        "root_lp_gap": "",
        "nodes": "",
        "time_s": "",
        "objective": "",
        "status": status or "",
    }
    if res is not None:
        row.update(
            root_lp_gap=repr(res.root_lp_gap),
            nodes=res.nodes,
            time_s=f"{res.time_s:.6f}",
            objective=repr(res.objective),
            status=status or res.status,
        )
    return row


def write_rows(path: str | os.PathLike, rows: list[dict], fields=RESULT_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
