"""Mini-batch Adam training with optional tractability regularizers."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from .bounds import Box, propagate_ibp
from .network import AdamState, Network, adam_step, pinball_np
from .regularizers import LPGapDetails, RegularizerConfig, total_loss


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dims: list
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "mse"  # mse | pinball
    # data source, used when train() is not handed a dataset
    benchmark: str = "peaks"
    n_samples: int = 20000
    test_fraction: float = 0.3
    n_quantiles: int = 1

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError(f"architecture {self.dims} needs at least two positive widths")
        for name in ("epochs", "batch_size", "n_samples", "n_quantiles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.mode not in ("mse", "pinball"):
            raise ValueError(f"mode must be mse or pinball, got {self.mode!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass
class TrainReport:
    seed: int
    epoch_loss: list
    epoch_width: list
    epoch_unstable: list
    train_loss: float
    test_loss: float
    unstable: int
    mean_width: float
    wall_time: float

    def metrics(self) -> dict:
        """Everything except the wall time (the part covered by the determinism contract)."""
        return {k: v for k, v in self.__dict__.items() if k != "wall_time"}


def make_dataset(cfg: TrainConfig):
    """(train, test) splits for the configured data source."""
    if cfg.benchmark == "synth-quantile":
        ds = datamod.synth_quantile_data(cfg.n_samples, cfg.dims[0], cfg.n_quantiles, seed=cfg.seed)
        train, test, _ = datamod.split_normalize(ds, cfg.test_fraction, cfg.seed, normalize_inputs=False)
        train.box = test.box = ds.box
    else:
        ds = datamod.make_benchmark_dataset(cfg.benchmark, cfg.n_samples, seed=cfg.seed)
        train, test, _ = datamod.split_normalize(ds, cfg.test_fraction, cfg.seed)
    return train, test


def evaluate(net: Network, ds: datamod.Dataset, mode: str = "mse", taus=None) -> float:
    pred = net.predict(ds.X)
    if mode == "mse":
        if pred.shape != ds.Y.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match targets {ds.Y.shape}")
        return float(np.mean((pred - ds.Y) ** 2))
    if mode == "pinball":
        taus = ds.taus if taus is None else taus
        if taus is None or pred.shape[1] != len(taus) or ds.Y.shape[1] != 1:
            raise ValueError("pinball evaluation needs scalar targets and one output per level")
        return pinball_np(pred, ds.Y[:, 0], taus)
    raise ValueError(f"unknown mode {mode!r}")


def _input_box(ds: datamod.Dataset) -> Box:
    if ds.box is not None:
        return ds.box
    return Box(ds.X.min(axis=0), ds.X.max(axis=0))


def train(cfg: TrainConfig, train_set: datamod.Dataset | None = None, test_set: datamod.Dataset | None = None):
    """Returns ``(net, report)``.  Deterministic per ``cfg.seed``."""
    t0 = time.perf_counter()
    if train_set is None:
        train_set, test_set = make_dataset(cfg)
    if train_set.X.shape[1] != cfg.dims[0]:
        raise ValueError(f"data has {train_set.X.shape[1]} inputs, architecture expects {cfg.dims[0]}")
    taus = train_set.taus if cfg.mode == "pinball" else None
    if cfg.mode == "pinball" and (taus is None or len(taus) != cfg.dims[-1]):
        raise ValueError("pinball mode needs one output per quantile level")
    if cfg.mode == "mse" and train_set.Y.shape[1] != cfg.dims[-1]:
        raise ValueError(f"data has {train_set.Y.shape[1]} targets, architecture outputs {cfg.dims[-1]}")

    box = _input_box(train_set)
    net = Network.init(cfg.dims, seed=cfg.seed)
    opt = AdamState.for_network(net, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    omega_rng = np.random.default_rng([cfg.seed, 2])
    N = len(train_set)
    need_bounds = cfg.reg.needs_bounds

    epoch_loss, epoch_width, epoch_unstable = [], [], []
    step = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(N)
        losses = []
        for start in range(0, N, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            X, Y = train_set.X[idx], train_set.Y[idx]
            tape = ad.Tape()
            tnet = net.bind(tape)
            profile = propagate_ibp(net, box, tnet) if need_bounds else None
            loss, parts = total_loss(
                tnet, X, Y, profile, cfg.reg, omega_rng, mode=cfg.mode, taus=taus, lp_details=None
            )
            for name, v in parts.items():
                if not np.isfinite(v):
                    raise TrainingError(f"non-finite {name} term ({v}) at epoch {epoch + 1}, step {step + 1}")
            grads = ad.gradient(tape, loss, tnet.params)
            adam_step(net, tnet.grads_to_arrays(grads), opt)
            losses.append(parts["total"])
            step += 1
        epoch_loss.append(float(np.mean(losses)))
        prof = propagate_ibp(net, box)
        epoch_width.append(float(np.mean(prof.hidden_widths())) if net.n_hidden else 0.0)
        epoch_unstable.append(len(prof.unstable))

    mode = cfg.mode
    report = TrainReport(
        seed=cfg.seed,
        epoch_loss=epoch_loss,
        epoch_width=epoch_width,
        epoch_unstable=epoch_unstable,
        train_loss=evaluate(net, train_set, mode, taus),
        test_loss=evaluate(net, test_set, mode, taus) if test_set is not None else float("nan"),
        unstable=epoch_unstable[-1],
        mean_width=epoch_width[-1],
        wall_time=time.perf_counter() - t0,
    )
    return net, report
