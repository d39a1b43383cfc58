"""Training penalties that target the MILP embedding of a ReLU network.

All penalties are tape expressions.  The bound-based ones (``bw``, ``sn``,
``sn2``) are means over hidden neurons of a :class:`BoundsProfile` built on
the tape; ``l1``/``l2`` are raw parameter sums.  The LP-gap penalty solves one
fixed-input relaxation per sample and injects the dual-weighted gradient
through a straight-through proxy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lp as lpmod
from .bounds import BoundsProfile
from .network import TapeNet, mse_loss, pinball_loss

NAMES = ("l1", "l2", "bw", "sn", "sn2", "lp")


@dataclass
class RegularizerConfig:
    l1: float = 0.0
    l2: float = 0.0
    bw: float = 0.0
    sn: float = 0.0
    sn2: float = 0.0
    lp: float = 0.0
    lp_direction: str = "min"  # min | max | both
    lp_samples: int = 1
    projection: str = "sphere"  # sphere | nonnegative
    alpha: float = 0.0  # adds lp * alpha * R_BW (combined mode)

    def __post_init__(self):
        for name in NAMES + ("alpha",):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"regularizer weight {name}={v} must be finite and >= 0")
        if self.lp_direction not in ("min", "max", "both"):
            raise ValueError(f"lp_direction must be min, max or both, got {self.lp_direction!r}")
        if self.projection not in ("sphere", "nonnegative"):
            raise ValueError(f"projection must be sphere or nonnegative, got {self.projection!r}")
        if self.lp_samples < 1:
            raise ValueError("lp_samples must be at least 1")

    @classmethod
    def single(cls, name: str, lam: float, **kw) -> "RegularizerConfig":
        """Config for one named regularizer; ``'bw+lp'`` weights both terms by ``lam``."""
        if name in ("none", ""):
            return cls(**kw)
        parts = name.split("+")
        for p in parts:
            if p not in NAMES:
                raise ValueError(f"unknown regularizer {p!r}")
        return cls(**{p: lam for p in parts}, **kw)

    @property
    def needs_bounds(self) -> bool:
        return any(getattr(self, n) > 0 for n in ("bw", "sn", "sn2", "lp"))


# ---------------------------------------------------------------- shrinkage


def reg_l1(tnet: TapeNet) -> ad.Var:
    terms = [ad.sum_(ad.abs_(p)) for p in tnet.params]
    return _sum(terms)


def reg_l2(tnet: TapeNet) -> ad.Var:
    terms = [ad.sum_(ad.square(p)) for p in tnet.params]
    return _sum(terms)


def _sum(terms: list[ad.Var]) -> ad.Var:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# ------------------------------------------------------------- bound based


def _hidden_mean(profile: BoundsProfile, per_layer) -> ad.Var:
    if profile.lower_vars is None:
        raise ValueError("bounds profile was not built on a tape")
    Lh = profile.n_hidden_layers
    tape = profile.lower_vars[1].tape
    if Lh == 0:
        return tape.const([[0.0]])
    n = sum(profile.lower[l].shape[0] for l in range(1, Lh + 1))
    terms = [ad.sum_(per_layer(profile.lower_vars[l], profile.upper_vars[l])) for l in range(1, Lh + 1)]
    return ad.scale(_sum(terms), 1.0 / n)


def reg_bw(profile: BoundsProfile) -> ad.Var:
    """Mean pre-activation bound width ``U - L`` over hidden neurons."""
    return _hidden_mean(profile, lambda L, U: ad.sub(U, L))


def reg_sn(profile: BoundsProfile) -> ad.Var:
    """Mean distance to stability ``min([-L]^+, [U]^+)``."""
    return _hidden_mean(profile, lambda L, U: ad.minimum(ad.pos(ad.scale(L, -1.0)), ad.pos(U)))


def reg_sn2(profile: BoundsProfile) -> ad.Var:
    """Mean of ``-tanh(1 + U L)``."""
    def term(L, U):
        one = L.tape.const(np.ones(L.shape))
        return ad.scale(ad.tanh(ad.add(ad.mul(U, L), one)), -1.0)

    return _hidden_mean(profile, term)


# ------------------------------------------------------------------ LP gap


def random_direction(K: int, rng: np.random.Generator, mode: str = "sphere") -> np.ndarray:
    if K == 1:
        return np.ones(1)
    w = rng.standard_normal(K)
    if mode == "nonnegative":
        w = np.abs(w)
    return w / np.linalg.norm(w)


@dataclass
class LPGapDetails:
    """Per-LP quantities behind one evaluation of :func:`reg_lp`."""

    gaps: list = field(default_factory=list)
    values: list = field(default_factory=list)
    outputs: list = field(default_factory=list)  # projected network outputs
    senses: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    duals: list = field(default_factory=list)  # nu[l] lists
    post: list = field(default_factory=list)  # LP xhat* lists
    samples: list = field(default_factory=list)  # index of the sample each LP belongs to
    n_samples: int = 0

    @property
    def mean_gap(self) -> float:
        per = np.zeros(self.n_samples)
        for i, g in zip(self.samples, self.gaps):
            per[i] += g
        return float(np.mean(per))


def reg_lp(
    tnet: TapeNet,
    profile: BoundsProfile,
    X,
    cfg: RegularizerConfig | None = None,
    rng: np.random.Generator | None = None,
    details: LPGapDetails | None = None,
) -> ad.Var:
    """Mean pointwise LP relaxation gap over the rows of ``X``.

    The forward value is the solver gap; the backward pass sees
    ``d f / d theta - sum_l nu_l^T (d/d theta)(W_l xhat*_{l-1} + b_l)`` with the
    big-M constants held fixed.
    """
    cfg = cfg or RegularizerConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("reg_lp: no samples")
    net, tape = tnet.net, tnet.tape
    K = net.dims[-1]
    senses = {"min": ["min"], "max": ["max"], "both": ["min", "max"]}[cfg.lp_direction]
    per_sample = []
    for i, x in enumerate(X):
        omega = random_direction(K, rng, cfg.projection)
        f = tnet.forward(x[None, :])  # (K, 1)
        f_proj = ad.matmul(tape.const(omega[None, :]), f)
        delta = None
        for sense in senses:
            model = lpmod.build_fixed_input_lp(net, profile, x, omega, sense)
            sol = lpmod.solve_lp(model)
            if not sol.optimal:
                raise lpmod.LPError(f"fixed-input relaxation returned {sol.status}")
            nu = lpmod.layer_duals(model, sol)
            xs = lpmod.post_activation_values(model, sol)
            proxy = _dual_proxy(tnet, nu, xs)
            v_st = ad.add(ad.sub(proxy, ad.detach(proxy)), tape.const([[sol.value]]))
            d = ad.sub(f_proj, v_st) if sense == "min" else ad.sub(v_st, f_proj)
            delta = d if delta is None else ad.add(delta, d)
            if details is not None:
                details.gaps.append(d.item())
                details.values.append(sol.value)
                details.outputs.append(f_proj.item())
                details.senses.append(sense)
                details.directions.append(omega)
                details.duals.append(nu)
                details.post.append(xs)
                details.samples.append(i)
        per_sample.append(delta)
    if details is not None:
        details.n_samples = len(per_sample)
    return ad.mean(ad.concat(per_sample))


def _dual_proxy(tnet: TapeNet, nu: list, xs: list) -> ad.Var:
    """``sum_l nu_l^T (W_l xhat*_{l-1} + b_l)`` with ``nu`` and ``xhat*`` constant."""
    tape = tnet.tape
    terms = []
    for l in range(1, len(tnet.W) + 1):
        pre = ad.affine(tnet.W[l - 1], tape.const(xs[l - 1].reshape(-1, 1)), tnet.b[l - 1])
        terms.append(ad.sum_(ad.mul(tape.const(nu[l].reshape(-1, 1)), pre)))
    return _sum(terms)


# -------------------------------------------------------------- composition


def total_loss(
    tnet: TapeNet,
    X,
    Y,
    profile: BoundsProfile | None,
    cfg: RegularizerConfig,
    rng: np.random.Generator | None = None,
    mode: str = "mse",
    taus=None,
    lp_details: LPGapDetails | None = None,
) -> tuple[ad.Var, dict]:
    """Data loss plus every regularizer with a positive weight.

    Terms with weight 0 are skipped entirely, so they cannot perturb the
    computation (or the random stream) of an unregularized run.
    """
    if mode == "mse":
        data = mse_loss(tnet, X, Y)
    elif mode == "pinball":
        data = pinball_loss(tnet.forward(X), np.asarray(Y).reshape(-1), taus)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    parts = {"data": data.item()}
    total = data
    if cfg.needs_bounds and profile is None:
        raise ValueError("bound-based regularizers need a bounds profile")

    def add(name, lam, term):
        nonlocal total
        parts[name] = term.item()
        total = ad.add(total, ad.scale(term, lam))

    if cfg.l1 > 0:
        add("l1", cfg.l1, reg_l1(tnet))
    if cfg.l2 > 0:
        add("l2", cfg.l2, reg_l2(tnet))
    if cfg.bw > 0:
        add("bw", cfg.bw, reg_bw(profile))
    if cfg.sn > 0:
        add("sn", cfg.sn, reg_sn(profile))
    if cfg.sn2 > 0:
        add("sn2", cfg.sn2, reg_sn2(profile))
    if cfg.lp > 0:
        Xs = np.atleast_2d(np.asarray(X))[: cfg.lp_samples]
        add("lp", cfg.lp, reg_lp(tnet, profile, Xs, cfg, rng, lp_details))
        if cfg.alpha > 0:
            add("lp_bw", cfg.lp * cfg.alpha, reg_bw(profile))
    parts["total"] = total.item()
    return total, parts
