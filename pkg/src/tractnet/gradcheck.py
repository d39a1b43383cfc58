"""Finite-difference checks of the regularizer gradients and of the LP dual gradient."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lp as lpmod
from .bounds import Box, propagate_ibp
from .network import Network
from .regularizers import reg_bw, reg_l1, reg_l2, reg_sn, reg_sn2

KINK_TOL = 1e-6


def _term_fns():
    return {
        "l1": lambda tnet, prof: reg_l1(tnet),
        "l2": lambda tnet, prof: reg_l2(tnet),
        "bw": lambda tnet, prof: reg_bw(prof),
        "sn": lambda tnet, prof: reg_sn(prof),
        "sn2": lambda tnet, prof: reg_sn2(prof),
    }


def random_case(rng: np.random.Generator, max_in: int = 3, max_depth: int = 3, max_width: int = 6):
    depth = int(rng.integers(1, max_depth + 1))
    dims = [int(rng.integers(1, max_in + 1))] + [int(rng.integers(1, max_width + 1)) for _ in range(depth)] + [1]
    net = Network.init(dims, seed=int(rng.integers(2**31)))
    # widen the biases so that stable and unstable neurons both occur
    for b in net.biases:
        b += rng.normal(0.0, 0.3, b.shape)
    c = rng.uniform(-1.0, 1.0, dims[0])
    r = rng.uniform(0.1, 1.0, dims[0])
    return net, Box(c - r, c + r)


def _kinks(net: Network, box: Box) -> np.ndarray:
    """Quantities whose sign change moves a term across a nondifferentiable point."""
    prof = propagate_ibp(net, box)
    parts = [p.ravel() for p in net.params()]  # |.|, [W]^+, [W]^-
    for l in range(1, len(net.weights) + 1):
        parts += [prof.lower[l], prof.upper[l], -prof.lower[l] - prof.upper[l]]
    return np.concatenate(parts)


def term_value(net: Network, box: Box, name: str, fns=None) -> float:
    fns = fns or _term_fns()
    tape = ad.Tape()
    tnet = net.bind(tape)
    prof = propagate_ibp(net, box, tnet)
    return fns[name](tnet, prof).item()


def term_grad(net: Network, box: Box, name: str, fns=None) -> list[np.ndarray]:
    fns = fns or _term_fns()
    tape = ad.Tape()
    tnet = net.bind(tape)
    prof = propagate_ibp(net, box, tnet)
    out = fns[name](tnet, prof)
    return tnet.grads_to_arrays(ad.gradient(tape, out, tnet.params))


@dataclass
class Failure:
    check: str
    param: int
    fd: float
    analytic: float

    def __str__(self):
        return f"reg_{self.check}: parameter {self.param}: fd={self.fd:.10g} analytic={self.analytic:.10g}"


@dataclass
class RegCheckReport:
    checked: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    max_rel: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_regularizers(
    seed: int = 0,
    n_nets: int = 50,
    names=("l1", "l2", "bw", "sn", "sn2"),
    eps: float = 1e-5,
    rtol: float = 1e-4,
    fns=None,
) -> RegCheckReport:
    """Central differences against tape gradients, skipping entries within KINK_TOL of a kink.

    The relative error is ``|a - fd| / max(|a|, |fd|, 1e-6)``.
    """
    fns = fns or _term_fns()
    rng = np.random.default_rng(seed)
    rep = RegCheckReport()
    for name in names:
        rep.checked[name] = rep.skipped[name] = 0
        rep.max_rel[name] = 0.0
    for _ in range(n_nets):
        net, box = random_case(rng)
        k0 = _kinks(net, box)
        for name in names:
            grads = np.concatenate([g.ravel() for g in term_grad(net, box, name, fns)])
            flat = 0
            for p in net.params():
                pf = p.reshape(-1)
                for i in range(pf.size):
                    orig = pf[i]
                    pf[i] = orig + eps
                    vp, kp = term_value(net, box, name, fns), _kinks(net, box)
                    pf[i] = orig - eps
                    vm, km = term_value(net, box, name, fns), _kinks(net, box)
                    pf[i] = orig
                    moved = (kp != k0) | (km != k0)
                    near = moved & ((np.abs(k0) < KINK_TOL) | (np.sign(kp) != np.sign(km)))
                    if near.any():
                        rep.skipped[name] += 1
                        flat += 1
                        continue
                    fd = (vp - vm) / (2 * eps)
                    a = grads[flat]
                    rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                    rep.checked[name] += 1
                    rep.max_rel[name] = max(rep.max_rel[name], rel)
                    if rel > rtol:
                        rep.failures.append(Failure(name, flat, fd, a))
                    flat += 1
    return rep


# ------------------------------------------------------------------ LP duals


@dataclass
class DualCheckReport:
    probes: int = 0
    nondegenerate: int = 0
    max_err: float = 0.0
    failures: list = field(default_factory=list)
    cases: int = 0

    @property
    def skipped(self) -> int:
        return self.probes - self.nondegenerate

    @property
    def nondegenerate_fraction(self) -> float:
        return self.nondegenerate / self.probes if self.probes else 0.0

    @property
    def ok(self) -> bool:
        return not self.failures and self.nondegenerate_fraction >= 0.8


def _perturbed_value(net, prof, x, l, j, delta, sense):
    net.biases[l - 1][j] += delta
    try:
        m = lpmod.build_fixed_input_lp(net, prof, x, None, sense)
        return lpmod.solve_lp(m)
    finally:
        net.biases[l - 1][j] -= delta


def check_lp_duals(
    seed: int = 0,
    n_cases: int = 100,
    n_probe: int = 5,
    eps: float = 1e-5,
    tol: float = 1e-3,
    max_cases: int | None = None,
) -> DualCheckReport:
    """Perturb biases by +-eps with the big-M constants held fixed; compare to nu.

    A probe counts only when the active-set fingerprint at b, b+eps and b-eps
    agree.  If fewer than 80% of probes qualify after ``n_cases`` cases, more
    cases are drawn (up to ``max_cases``).
    """
    rng = np.random.default_rng(seed)
    rep = DualCheckReport()
    max_cases = max_cases or 4 * n_cases
    while rep.cases < n_cases or (rep.nondegenerate_fraction < 0.8 and rep.cases < max_cases):
        net, box = random_case(rng, max_in=3, max_depth=3, max_width=8)
        prof = propagate_ibp(net, box)
        x = box.sample(1, rng)[0]
        sense = "min" if rng.uniform() < 0.5 else "max"
        model = lpmod.build_fixed_input_lp(net, prof, x, None, sense)
        sol = lpmod.solve_lp(model)
        if not sol.optimal:
            continue
        rep.cases += 1
        nu = lpmod.layer_duals(model, sol)
        slots = [(l, j) for l in range(1, len(net.weights) + 1) for j in range(net.dims[l])]
        picks = rng.choice(len(slots), size=min(n_probe, len(slots)), replace=False)
        for s in picks:
            l, j = slots[s]
            rep.probes += 1
            sp = _perturbed_value(net, prof, x, l, j, eps, sense)
            sm = _perturbed_value(net, prof, x, l, j, -eps, sense)
            if not (sp.optimal and sm.optimal) or not (sp.fingerprint == sol.fingerprint == sm.fingerprint):
                continue
            rep.nondegenerate += 1
            fd = (sp.value - sm.value) / (2 * eps)
            err = abs(fd - nu[l][j])
            rep.max_err = max(rep.max_err, err)
            if err > tol:
                rep.failures.append(Failure("lp", s, fd, float(nu[l][j])))
    return rep
