"""Interval bound propagation (IBP) over an input box."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .network import Network, TapeNet


@dataclass(frozen=True)
class Box:
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        lb = np.asarray(self.lb, dtype=np.float64).reshape(-1)
        ub = np.asarray(self.ub, dtype=np.float64).reshape(-1)
        if lb.shape != ub.shape:
            raise ValueError("box bounds have different lengths")
        if np.any(lb > ub):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @classmethod
    def cube(cls, n: int, lo: float, hi: float) -> "Box":
        return cls(np.full(n, lo), np.full(n, hi))

    @property
    def dim(self) -> int:
        return self.lb.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lb, self.ub, size=(n, self.dim))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lb - tol) and np.all(x <= self.ub + tol))


@dataclass
class BoundsProfile:
    """Pre-activation bounds ``lower[l], upper[l]`` for l = 1..L+1 (index 0 unused)
    and post-activation bounds ``post_lower[l], post_upper[l]`` for l = 0..L.

    When built on a tape, ``lower_vars``/``upper_vars`` hold the matching
    ``(n_l, 1)`` Vars.
    """

    lower: list
    upper: list
    post_lower: list
    post_upper: list
    lower_vars: list | None = None
    upper_vars: list | None = None
    box: Box | None = None

    @property
    def n_hidden_layers(self) -> int:
        return len(self.lower) - 2

    @property
    def widths(self) -> list:
        return [None] + [u - l for l, u in zip(self.lower[1:], self.upper[1:])]

    def hidden_widths(self) -> np.ndarray:
        return np.concatenate([self.upper[l] - self.lower[l] for l in range(1, self.n_hidden_layers + 1)] or [np.zeros(0)])

    @property
    def unstable(self) -> list[tuple[int, int]]:
        """``(layer, neuron)`` pairs with ``L < 0 < U``, hidden layers only."""
        out = []
        for l in range(1, self.n_hidden_layers + 1):
            for j in np.flatnonzero((self.lower[l] < 0.0) & (self.upper[l] > 0.0)):
                out.append((l, int(j)))
        return out

    def is_unstable(self, l: int, j: int) -> bool:
        return bool(self.lower[l][j] < 0.0 < self.upper[l][j])

    def status(self, l: int, j: int) -> str:
        """'active', 'inactive' or 'unstable' for hidden neuron (l, j)."""
        if self.lower[l][j] >= 0.0:
            return "active"
        if self.upper[l][j] <= 0.0:
            return "inactive"
        return "unstable"


def propagate_ibp(net: Network, box: Box, tnet: TapeNet | None = None) -> BoundsProfile:
    """Layer-by-layer interval arithmetic.

    With ``tnet`` the recursion is also recorded on ``tnet.tape`` so that the
    bounds are differentiable with respect to the network parameters.
    """
    if box.dim != net.dims[0]:
        raise ValueError(f"box has dimension {box.dim}, network expects {net.dims[0]}")
    n_layers = len(net.weights)
    lo, up = [None], [None]
    plo, pup = [box.lb], [box.ub]
    for l, (W, b) in enumerate(zip(net.weights, net.biases), start=1):
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        Ll = Wp @ plo[-1] + Wn @ pup[-1] + b
        Ul = Wp @ pup[-1] + Wn @ plo[-1] + b
        lo.append(Ll)
        up.append(Ul)
        if l < n_layers:
            plo.append(np.maximum(Ll, 0.0))
            pup.append(np.maximum(Ul, 0.0))

    prof = BoundsProfile(lo, up, plo, pup, box=box)
    if tnet is not None:
        if tnet.net is not net:
            raise ValueError("tape network is bound to a different Network")
        tape = tnet.tape
        lv, uv = [None], [None]
        pl = tape.const(box.lb.reshape(-1, 1))
        pu = tape.const(box.ub.reshape(-1, 1))
        for l in range(1, n_layers + 1):
            W, b = tnet.W[l - 1], tnet.b[l - 1]
            Wp, Wn = ad.pos(W), ad.neg(W)
            Lv = ad.add(ad.add(ad.matmul(Wp, pl), ad.matmul(Wn, pu)), b)
            Uv = ad.add(ad.add(ad.matmul(Wp, pu), ad.matmul(Wn, pl)), b)
            lv.append(Lv)
            uv.append(Uv)
            if l < n_layers:
                pl, pu = ad.pos(Lv), ad.pos(Uv)
        prof.lower_vars, prof.upper_vars = lv, uv
    return prof


def unstable_count(profile: BoundsProfile) -> tuple[int, list[tuple[int, int]]]:
    u = profile.unstable
    return len(u), u


@dataclass
class SoundnessReport:
    n_samples: int
    n_violations: int
    max_violation: float
    worst: tuple | None = None

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def soundness_check(
    net: Network, box: Box, profile: BoundsProfile, n_samples: int = 100, seed: int = 0, tol: float = 1e-9
) -> SoundnessReport:
    """Sample inputs in the box and report how far preactivations leave ``[L, U]``."""
    rng = np.random.default_rng(seed)
    X = box.sample(n_samples, rng)
    H = X.T
    n_viol, worst_v, worst = 0, 0.0, None
    n_layers = len(net.weights)
    for l, (W, b) in enumerate(zip(net.weights, net.biases), start=1):
        Z = W @ H + b[:, None]
        below = profile.lower[l][:, None] - Z
        above = Z - profile.upper[l][:, None]
        v = np.maximum(below, above)
        n_viol += int(np.count_nonzero(v > tol))
        m = float(v.max()) if v.size else 0.0
        if m > worst_v:
            worst_v = m
            j, i = np.unravel_index(int(np.argmax(v)), v.shape)
            worst = (l, int(j), int(i))
        if l < n_layers:
            H = np.maximum(Z, 0.0)
    return SoundnessReport(n_samples, n_viol, max(worst_v, 0.0), worst)
