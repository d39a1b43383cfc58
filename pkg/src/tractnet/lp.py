"""Big-M LP relaxations of a ReLU network and a bounded-variable simplex solver.

Model layout (all variables are columns of one LP)::

    min/max  c'y
    s.t.     A_eq y  = b_eq     one row per preactivation definition
             G y    <= h        three big-M rows per unstable neuron
             lb <= y <= ub

For every hidden neuron the big-M encoding is ``xhat >= z`` (row),
``xhat >= 0`` (bound), ``xhat <= z - L(1 - a)`` (row) and ``xhat <= U a`` (row).
Stable neurons carry no ``a``: a stable-active neuron reuses its ``z`` column as
``xhat``; a stable-inactive neuron keeps an ``xhat`` column fixed at 0.

Dual sign conventions (for either sense):

* ``eq_duals[i] = dV/d b_eq[i]`` (shadow price of the equality right-hand side);
* ``ineq_duals >= 0`` are the multipliers of ``G y <= h`` in the minimisation
  form, so ``dV/dh = -ineq_duals`` for ``min`` and ``+ineq_duals`` for ``max``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds import Box, BoundsProfile
from .network import Network

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-10
TIGHT_TOL = 1e-8
STALL_PIVOTS = 1000
REFACTOR_EVERY = 50


class LPError(RuntimeError):
    pass


@dataclass
class LPModel:
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    sense: str = "min"
    obj_offset: float = 0.0
    # index maps; hidden layers l = 1..L, output layer L+1
    input_vars: list = field(default_factory=list)
    z_vars: list = field(default_factory=list)  # z_vars[l][j], index 0 unused
    xhat_vars: list = field(default_factory=list)  # xhat_vars[l][j], l = 0..L
    a_vars: dict = field(default_factory=dict)  # (l, j) -> var id
    eq_rows: list = field(default_factory=list)  # eq_rows[l][j]
    bigm_rows: dict = field(default_factory=dict)  # (l, j) -> (row xhat>=z, row ub1, row ub2)
    integer_vars: list = field(default_factory=list)
    names: list = field(default_factory=list)

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def n_eq(self) -> int:
        return self.b_eq.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.h.shape[0]

    def layer_eq_rows(self, l: int) -> list:
        return self.eq_rows[l]


@dataclass
class LPSolution:
    status: str  # optimal | infeasible | unbounded | iteration-limit
    value: float = float("nan")
    y: np.ndarray | None = None
    eq_duals: np.ndarray | None = None
    ineq_duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    fingerprint: tuple = ()
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


# -------------------------------------------------------------------- builders


def _build(
    net: Network,
    profile: BoundsProfile,
    in_lb: np.ndarray,
    in_ub: np.ndarray,
    objective,
    sense: str,
    input_cost=None,
    binary_inputs: bool = False,
) -> LPModel:
    if sense not in ("min", "max"):
        raise ValueError(f"sense must be 'min' or 'max', got {sense!r}")
    dims = net.dims
    n0, K = dims[0], dims[-1]
    if in_lb.shape[0] != n0:
        raise ValueError(f"input has dimension {in_lb.shape[0]}, network expects {n0}")
    if profile.n_hidden_layers != net.n_hidden_layers:
        raise ValueError("bounds profile does not match the network depth")
    w = _objective_weights(objective, K)
    Lh = net.n_hidden_layers

    lb, ub, names = [], [], []

    def var(lo, hi, name):
        lb.append(lo)
        ub.append(hi)
        names.append(name)
        return len(lb) - 1

    input_vars = [var(in_lb[k], in_ub[k], f"x_{k}") for k in range(n0)]
    z_vars: list = [None]
    xhat_vars: list = [input_vars]
    a_vars: dict = {}
    for l in range(1, Lh + 1):
        zl, xl = [], []
        for j in range(dims[l]):
            zid = var(-np.inf, np.inf, f"z_{l}_{j}")
            zl.append(zid)
            st = profile.status(l, j)
            if st == "active":
                xl.append(zid)
            elif st == "inactive":
                xl.append(var(0.0, 0.0, f"xh_{l}_{j}"))
            else:
                xl.append(var(0.0, np.inf, f"xh_{l}_{j}"))
                a_vars[(l, j)] = var(0.0, 1.0, f"a_{l}_{j}")
        z_vars.append(zl)
        xhat_vars.append(xl)
    z_vars.append([var(-np.inf, np.inf, f"z_{Lh + 1}_{j}") for j in range(K)])

    n = len(lb)
    A_rows, b_eq, eq_rows = [], [], [None]
    for l in range(1, Lh + 2):
        W, b = net.weights[l - 1], net.biases[l - 1]
        prev = xhat_vars[l - 1]
        rows = []
        for j in range(dims[l]):
            row = np.zeros(n)
            row[z_vars[l][j]] = 1.0
            for k, col in enumerate(prev):
                row[col] -= W[j, k]
            A_rows.append(row)
            b_eq.append(b[j])
            rows.append(len(A_rows) - 1)
        eq_rows.append(rows)

    G_rows, h, bigm_rows = [], [], {}
    for (l, j), aid in a_vars.items():
        z, xh = z_vars[l][j], xhat_vars[l][j]
        Lo, Up = profile.lower[l][j], profile.upper[l][j]
        r1 = np.zeros(n)
        r1[z], r1[xh] = 1.0, -1.0
        r2 = np.zeros(n)
        r2[xh], r2[z], r2[aid] = 1.0, -1.0, -Lo
        r3 = np.zeros(n)
        r3[xh], r3[aid] = 1.0, -Up
        G_rows += [r1, r2, r3]
        h += [0.0, -Lo, 0.0]
        bigm_rows[(l, j)] = (len(G_rows) - 3, len(G_rows) - 2, len(G_rows) - 1)

    c = np.zeros(n)
    for j, zid in enumerate(z_vars[Lh + 1]):
        c[zid] = w[j]
    if input_cost is not None:
        ic = np.asarray(input_cost, dtype=np.float64).reshape(-1)
        if ic.shape[0] != n0:
            raise ValueError("input cost has the wrong length")
        c[input_vars] += ic

    integer = list(a_vars.values())
    if binary_inputs:
        integer = list(input_vars) + integer

    return LPModel(
        c=c,
        A_eq=np.array(A_rows).reshape(len(A_rows), n),
        b_eq=np.array(b_eq, dtype=np.float64),
        G=np.array(G_rows).reshape(len(G_rows), n),
        h=np.array(h, dtype=np.float64),
        lb=np.array(lb, dtype=np.float64),
        ub=np.array(ub, dtype=np.float64),
        sense=sense,
        input_vars=input_vars,
        z_vars=z_vars,
        xhat_vars=xhat_vars,
        a_vars=a_vars,
        eq_rows=eq_rows,
        bigm_rows=bigm_rows,
        integer_vars=integer,
        names=names,
    )


def _objective_weights(objective, K: int) -> np.ndarray:
    if objective is None:
        if K != 1:
            raise ValueError("multi-output network needs an output weight vector")
        return np.ones(1)
    if isinstance(objective, (int, np.integer)):
        w = np.zeros(K)
        w[int(objective)] = 1.0
        return w
    w = np.asarray(objective, dtype=np.float64).reshape(-1)
    if w.shape[0] != K or not np.all(np.isfinite(w)):
        raise ValueError(f"objective weights must be {K} finite numbers")
    return w


def build_fixed_input_lp(net: Network, profile: BoundsProfile, x, objective=None, sense: str = "min") -> LPModel:
    """LP relaxation with the network input pinned to ``x``.

    ``objective`` is None (single output), an output index, or a weight vector
    over the outputs.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return _build(net, profile, x, x, objective, sense)


def build_box_input_lp(
    net: Network,
    profile: BoundsProfile,
    box: Box,
    objective=None,
    sense: str = "min",
    input_cost=None,
    binary_inputs: bool = False,
) -> LPModel:
    """Root relaxation over the input box (or [0, 1] inputs flagged integer)."""
    if not isinstance(box, Box):
        raise ValueError("box must be a Box")
    return _build(net, profile, box.lb, box.ub, objective, sense, input_cost, binary_inputs)


# ---------------------------------------------------------------------- solver


def solve_lp(
    model: LPModel,
    lb: np.ndarray | None = None,
    ub: np.ndarray | None = None,
    max_iter: int | None = None,
) -> LPSolution:
    """Solve ``model`` (optionally with overridden variable bounds)."""
    lb = model.lb if lb is None else np.asarray(lb, dtype=np.float64)
    ub = model.ub if ub is None else np.asarray(ub, dtype=np.float64)
    if np.any(lb > ub + FEAS_TOL):
        return LPSolution("infeasible")
    sgn = 1.0 if model.sense == "min" else -1.0
    res = _simplex(
        sgn * model.c, model.A_eq, model.b_eq, model.G, model.h, lb, ub, max_iter=max_iter, crash=_crash(model)
    )
    status, x, pi, d, iters = res
    if status != "optimal":
        return LPSolution(status, iterations=iters)
    n = model.n_vars
    y = x[:n]
    value = float(model.c @ y) + model.obj_offset
    m_eq = model.n_eq
    eq_duals = sgn * pi[:m_eq]
    ineq_duals = -pi[m_eq:]
    fp = active_set(model, y, lb, ub)
    return LPSolution(
        "optimal",
        value=value,
        y=y.copy(),
        eq_duals=eq_duals,
        ineq_duals=ineq_duals,
        reduced_costs=d[:n].copy(),
        fingerprint=fp,
        iterations=iters,
    )


def _crash(model: LPModel):
    """One z column per preactivation row; the equality block is unit lower triangular in them."""
    if not model.eq_rows or model.eq_rows[0] is not None:
        return None
    cols = np.empty(model.n_eq, dtype=np.int64)
    for rows, zs in zip(model.eq_rows[1:], model.z_vars[1:]):
        cols[rows] = zs
    return cols


def active_set(model: LPModel, y: np.ndarray, lb=None, ub=None, tol: float = TIGHT_TOL) -> tuple:
    """Sorted ids of tight inequality rows and bounds."""
    lb = model.lb if lb is None else lb
    ub = model.ub if ub is None else ub
    out = []
    if model.n_ineq:
        slack = model.h - model.G @ y
        out += [("row", int(i)) for i in np.flatnonzero(np.abs(slack) <= tol)]
    out += [("lb", int(j)) for j in np.flatnonzero(np.abs(y - lb) <= tol)]
    out += [("ub", int(j)) for j in np.flatnonzero(np.abs(ub - y) <= tol)]
    return tuple(sorted(out))


def _simplex(c, A_eq, b_eq, G, h, lb, ub, max_iter=None, crash=None):
    """Two-phase bounded-variable primal simplex with an explicit basis inverse.

    Returns ``(status, x, pi, d, iterations)`` where ``x`` covers structural
    and slack columns, ``pi`` are row duals (dV/d rhs) and ``d`` reduced costs
    of the structural+slack columns.
    """
    n = c.shape[0]
    m_eq, m_in = A_eq.shape[0], G.shape[0]
    m = m_eq + m_in
    # structural | slacks
    A = np.zeros((m, n + m_in))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = G
    A[m_eq:, n:] = np.eye(m_in)
    rhs = np.concatenate([b_eq, h])
    lo = np.concatenate([lb, np.zeros(m_in)])
    hi = np.concatenate([ub, np.full(m_in, np.inf)])

    # nonbasic start: a finite bound, else 0 for free columns
    x = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
    basic = np.full(m, -1, dtype=np.int64)
    if crash is not None:
        # equality rows start with their crash columns basic
        cols = np.asarray(crash, dtype=np.int64)
        x[cols] = 0.0
        x[cols] = np.linalg.solve(A_eq[:, cols], b_eq - A_eq @ x[:n])
        basic[:m_eq] = cols
    resid = rhs - A @ x
    art_rows, art_sign = [], []
    for i in range(m):
        if basic[i] >= 0:
            continue
        if i >= m_eq and resid[i] >= -FEAS_TOL:
            basic[i] = n + (i - m_eq)
            x[basic[i]] = max(resid[i] + x[basic[i]], 0.0)
        else:
            art_rows.append(i)
            art_sign.append(1.0 if resid[i] >= 0 else -1.0)
    n_art = len(art_rows)
    N = n + m_in + n_art
    Afull = np.zeros((m, N))
    Afull[:, : n + m_in] = A
    for k, (i, s) in enumerate(zip(art_rows, art_sign)):
        Afull[i, n + m_in + k] = s
        basic[i] = n + m_in + k
    lo = np.concatenate([lo, np.zeros(n_art)])
    hi = np.concatenate([hi, np.full(n_art, np.inf)])
    x = np.concatenate([x, np.zeros(n_art)])
    for k, i in enumerate(art_rows):
        x[n + m_in + k] = abs(resid[i])

    if max_iter is None:
        max_iter = 50 * (m + N) + 1000
    state = _State(Afull, rhs, lo, hi, x, basic)
    total = 0
    if n_art:
        c1 = np.zeros(N)
        c1[n + m_in :] = 1.0
        status, it = state.run(c1, max_iter)
        total += it
        if status != "optimal":
            return status, None, None, None, total
        if c1 @ state.x > 1e-7 * max(1.0, np.abs(rhs).max(initial=0.0)):
            return "infeasible", None, None, None, total
        # freeze artificials at zero for phase 2
        state.hi[n + m_in :] = 0.0
        state.x[n + m_in :] = np.clip(state.x[n + m_in :], 0.0, 0.0)
        state.recompute()
    c2 = np.zeros(N)
    c2[:n] = c
    status, it = state.run(c2, max_iter - total)
    total += it
    if status != "optimal":
        return status, None, None, None, total
    state.refactor()
    pi = state.Binv.T @ c2[state.basic]
    d = c2 - Afull.T @ pi
    return "optimal", state.x[: n + m_in].copy(), pi, d[: n + m_in], total


class _State:
    def __init__(self, A, rhs, lo, hi, x, basic):
        self.A = A
        self.rhs = rhs
        self.lo = lo
        self.hi = hi
        self.x = x
        self.basic = basic
        self.m, self.N = A.shape
        self.is_basic = np.zeros(self.N, dtype=bool)
        self.is_basic[basic] = True
        self.refactor()

    def refactor(self):
        B = self.A[:, self.basic]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - basis kept nonsingular by pivot tolerance
            raise LPError("singular basis") from exc
        self.recompute()

    def recompute(self):
        nb = ~self.is_basic
        r = self.rhs - self.A[:, nb] @ self.x[nb]
        self.x[self.basic] = self.Binv @ r

    def run(self, cost, max_iter):
        A, lo, hi, x = self.A, self.lo, self.hi, self.x
        fixed = hi - lo <= 0.0
        free = np.isneginf(lo) & np.isposinf(hi)
        degenerate = 0
        bland = False
        since_refactor = 0
        for it in range(max_iter):
            pi = self.Binv.T @ cost[self.basic]
            d = cost - A.T @ pi
            at_lo = np.abs(x - lo) <= FEAS_TOL
            at_hi = np.abs(hi - x) <= FEAS_TOL
            inc = (d < -OPT_TOL) & ~at_hi
            dec = (d > OPT_TOL) & ~at_lo
            elig = (inc | dec) & ~self.is_basic & ~fixed
            # a free nonbasic column sitting strictly inside its range may move either way
            elig |= free & ~self.is_basic & (np.abs(d) > OPT_TOL)
            cand = np.flatnonzero(elig)
            if cand.size == 0:
                return "optimal", it
            if bland:
                q = int(cand[0])
            else:
                q = int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if d[q] < 0 else -1.0
            alpha = self.Binv @ A[:, q]
            # step limits
            t_best = hi[q] - lo[q]  # bound flip
            leave = -1
            leave_to_hi = False
            ad = alpha * direction
            xb = x[self.basic]
            lob, hib = lo[self.basic], hi[self.basic]
            dec_mask = ad > PIVOT_TOL
            inc_mask = ad < -PIVOT_TOL
            ratios = np.full(self.m, np.inf)
            ratios[dec_mask] = (xb[dec_mask] - lob[dec_mask]) / ad[dec_mask]
            ratios[inc_mask] = (hib[inc_mask] - xb[inc_mask]) / (-ad[inc_mask])
            ratios = np.maximum(ratios, 0.0)
            if np.isfinite(ratios).any():
                rmin = ratios.min()
                if rmin < t_best:
                    ties = np.flatnonzero(ratios <= rmin + 1e-12)
                    if bland:
                        r = int(ties[np.argmin(self.basic[ties])])
                    else:
                        r = int(ties[np.argmax(np.abs(alpha[ties]))])
                    leave = r
                    t_best = ratios[r]
                    leave_to_hi = bool(inc_mask[r])
            if not np.isfinite(t_best):
                return "unbounded", it
            t = t_best
            if t <= 1e-12:
                degenerate += 1
                if degenerate >= STALL_PIVOTS:
                    bland = True
            else:
                degenerate = 0
                bland = False
            x[q] += direction * t
            x[self.basic] = xb - t * ad
            if leave < 0:
                # bound flip, basis unchanged
                x[q] = hi[q] if direction > 0 else lo[q]
                continue
            out = self.basic[leave]
            x[out] = hi[out] if leave_to_hi else lo[out]
            # basis inverse update
            piv = alpha[leave]
            row = self.Binv[leave] / piv
            self.Binv -= np.outer(alpha, row)
            self.Binv[leave] = row
            self.basic[leave] = q
            self.is_basic[out] = False
            self.is_basic[q] = True
            since_refactor += 1
            if since_refactor >= REFACTOR_EVERY:
                self.refactor()
                since_refactor = 0
        return "iteration-limit", max_iter


# ---------------------------------------------------------------- duals & misc


def layer_duals(model: LPModel, sol: LPSolution) -> list:
    """``nu[l]`` for l = 1..L+1 (index 0 unused) with ``dV/db[l][j] = nu[l][j]``."""
    if not sol.optimal:
        raise LPError(f"duals requested for a {sol.status} solution")
    return [None] + [sol.eq_duals[rows] for rows in model.eq_rows[1:]]


def post_activation_values(model: LPModel, sol: LPSolution) -> list:
    """LP values of ``xhat[l]`` for l = 0..L (l = 0 is the input)."""
    return [sol.y[cols] for cols in model.xhat_vars]


def kkt_residuals(model: LPModel, sol: LPSolution, lb=None, ub=None) -> dict:
    """Primal feasibility, dual sign, complementary slackness and duality gap."""
    lb = model.lb if lb is None else lb
    ub = model.ub if ub is None else ub
    y = sol.y
    sgn = 1.0 if model.sense == "min" else -1.0
    primal = 0.0
    if model.n_eq:
        primal = max(primal, float(np.abs(model.A_eq @ y - model.b_eq).max()))
    slack = model.h - model.G @ y if model.n_ineq else np.zeros(0)
    if slack.size:
        primal = max(primal, float(max(0.0, -slack.min())))
    primal = max(primal, float(max(0.0, (lb - y).max(), (y - ub).max())))
    mu = sol.ineq_duals
    # reduced costs of the minimisation form
    pi_eq = sgn * sol.eq_duals
    pi_in = -mu
    d = sgn * model.c - model.A_eq.T @ pi_eq - model.G.T @ pi_in
    at_lo = np.abs(y - lb) <= TIGHT_TOL
    at_hi = np.abs(ub - y) <= TIGHT_TOL
    interior = ~at_lo & ~at_hi
    dual_sign = 0.0
    if mu.size:
        dual_sign = max(dual_sign, float(max(0.0, -mu.min())))
    viol = np.zeros_like(d)
    viol[interior] = np.abs(d[interior])
    only_lo = at_lo & ~at_hi
    only_hi = at_hi & ~at_lo
    viol[only_lo] = np.maximum(0.0, -d[only_lo])
    viol[only_hi] = np.maximum(0.0, d[only_hi])
    dual_sign = max(dual_sign, float(viol.max(initial=0.0)))
    comp = float(np.abs(mu * slack).max(initial=0.0))
    comp = max(comp, float(np.abs(d[interior]).max(initial=0.0)))
    # dual objective of the minimisation form
    bound_val = np.where(at_lo, lb, np.where(at_hi, ub, 0.0))
    bound_val = np.where(np.isfinite(bound_val), bound_val, 0.0)
    dual_obj = float(pi_eq @ model.b_eq + pi_in @ model.h + d @ bound_val)
    gap = abs(sgn * (sol.value - model.obj_offset) - dual_obj)
    return {"primal": primal, "dual_sign": dual_sign, "complementarity": comp, "duality_gap": gap}


def to_lp_format(model: LPModel) -> str:
    """CPLEX-LP text for cross-checking with external solvers."""
    names = model.names or [f"y{i}" for i in range(model.n_vars)]

    def expr(coefs):
        terms = [f"{'+' if v >= 0 else '-'} {abs(v):.17g} {names[i]}" for i, v in enumerate(coefs) if v != 0.0]
        return " ".join(terms) if terms else "0 " + names[0]

    out = io.StringIO()
    out.write("Minimize\n" if model.sense == "min" else "Maximize\n")
    out.write(f" obj: {expr(model.c)}\nSubject To\n")
    for i in range(model.n_eq):
        out.write(f" e{i}: {expr(model.A_eq[i])} = {model.b_eq[i]:.17g}\n")
    for i in range(model.n_ineq):
        out.write(f" g{i}: {expr(model.G[i])} <= {model.h[i]:.17g}\n")
    out.write("Bounds\n")
    for i, nm in enumerate(names):
        lo, hi = model.lb[i], model.ub[i]
        if np.isneginf(lo) and np.isposinf(hi):
            out.write(f" {nm} free\n")
        else:
            los = "-inf" if np.isneginf(lo) else f"{lo:.17g}"
            his = "+inf" if np.isposinf(hi) else f"{hi:.17g}"
            out.write(f" {los} <= {nm} <= {his}\n")
    if model.integer_vars:
        out.write("General\n " + " ".join(names[i] for i in model.integer_vars) + "\n")
    out.write("End\n")
    return out.getvalue()
