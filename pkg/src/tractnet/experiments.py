"""Experiment grid runner shared by the command line and the demo scripts."""
from __future__ import annotations

import csv
import glob
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import network as netmod
from .bounds import Box, propagate_ibp
from .milp import MilpSpec, result_row, solve_milp, SCHEMA_VERSION
from .regularizers import NAMES, RegularizerConfig
from .trainer import TrainConfig, make_dataset, train

OUTPUT_ENV = "TRACTNET_OUTPUT_DIR"

TRAIN_FIELDS = [
    "schema_version",
    "benchmark",
    "arch",
    "regularizer",
    "lambda",
    "seed",
    "train_loss",
    "test_loss",
    "unstable",
    "mean_width",
    "time_s",
    "model",
]
OPT_FIELDS = [
    "schema_version",
    "benchmark",
    "model",
    "seed",
    "arch",
    "regularizer",
    "lambda",
    "unstable",
    "root_lp_gap",
    "nodes",
    "time_s",
    "objective",
    "best_bound",
    "status",
]


class ConfigError(ValueError):
    pass


_TOP_KEYS = {
    "benchmark",
    "architectures",
    "regularizers",
    "lambdas",
    "seeds",
    "n_samples",
    "epochs",
    "batch_size",
    "test_fraction",
    "lr",
    "n_quantiles",
    "lp",
    "milp",
    "output_dir",
    "workers",
}
_LP_KEYS = {"direction", "samples", "projection", "alpha"}
_MILP_KEYS = {"time_limit", "node_limit", "sense", "heuristic_samples"}


@dataclass
class ExperimentConfig:
    benchmark: str = "peaks"
    architectures: list = field(default_factory=lambda: [[2, 25, 25, 1]])
    regularizers: list = field(default_factory=lambda: ["none"])
    lambdas: list = field(default_factory=lambda: [1e-3])
    seeds: list = field(default_factory=lambda: [0])
    n_samples: int = 20000
    epochs: int = 50
    batch_size: int = 128
    test_fraction: float = 0.3
    lr: float = 1e-3
    n_quantiles: int = 1
    lp: dict = field(default_factory=dict)
    milp: dict = field(default_factory=dict)
    output_dir: str = "results"
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        for k in d:
            if k not in _TOP_KEYS:
                raise ConfigError(f"unknown config key {k!r}")
        for sect, keys in (("lp", _LP_KEYS), ("milp", _MILP_KEYS)):
            sub = d.get(sect, {}) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"{sect}: must be a mapping")
            for k in sub:
                if k not in keys:
                    raise ConfigError(f"unknown config key {sect}.{k!r}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                d = yaml.safe_load(fh) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(d)

    def validate(self) -> None:
        if self.benchmark not in ("himmelblau", "peaks", "synth-quantile") and not (
            self.benchmark.startswith("ackley-") and self.benchmark[7:].isdigit()
        ):
            raise ConfigError(f"benchmark: unknown name {self.benchmark!r}")
        if not self.architectures:
            raise ConfigError("architectures: grid is empty")
        for a in self.architectures:
            if not isinstance(a, list) or len(a) < 2 or not all(isinstance(v, int) and v > 0 for v in a):
                raise ConfigError(f"architectures: {a!r} is not a list of positive widths")
        if not self.regularizers or not self.seeds:
            raise ConfigError("regularizers/seeds: grid is empty")
        for r in self.regularizers:
            for p in str(r).split("+"):
                if p != "none" and p not in NAMES:
                    raise ConfigError(f"regularizers: unknown name {p!r}")
        if any(r != "none" for r in self.regularizers) and not self.lambdas:
            raise ConfigError("lambdas: grid is empty")
        lams = []
        for lam in self.lambdas:
            try:
                v = float(lam)  # YAML 1.1 reads 1e-3 as a string
            except (TypeError, ValueError):
                raise ConfigError(f"lambdas: {lam!r} is not a number") from None
            if not v >= 0:
                raise ConfigError(f"lambdas: {lam!r} must be >= 0")
            lams.append(v)
        self.lambdas = lams
        try:
            self.lr = float(self.lr)
            self.test_fraction = float(self.test_fraction)
        except (TypeError, ValueError):
            raise ConfigError("lr/test_fraction: must be numbers") from None
        if not self.lr > 0:
            raise ConfigError("lr: must be positive")
        for name in ("n_samples", "epochs", "batch_size", "n_quantiles", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {v!r}")
        if not 0.0 < float(self.test_fraction) < 1.0:
            raise ConfigError("test_fraction: must lie in (0, 1)")
        try:
            self.reg_config("none", 0.0)
            self.milp_options()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def reg_config(self, name: str, lam: float) -> RegularizerConfig:
        lp = self.lp or {}
        kw = dict(
            lp_direction=lp.get("direction", "min"),
            lp_samples=int(lp.get("samples", 1)),
            projection=lp.get("projection", "sphere"),
            alpha=float(lp.get("alpha", 0.0)),
        )
        if name == "none":
            return RegularizerConfig(**kw)
        return RegularizerConfig.single(name, float(lam), **kw)

    def milp_options(self) -> dict:
        m = dict(self.milp or {})
        out = {
            "time_limit": float(m.get("time_limit", 60.0)),
            "node_limit": m.get("node_limit"),
            "sense": m.get("sense", "min"),
            "heuristic_samples": int(m.get("heuristic_samples", 256)),
        }
        if out["sense"] not in ("min", "max"):
            raise ValueError("milp.sense: must be min or max")
        if out["time_limit"] <= 0:
            raise ValueError("milp.time_limit: must be positive")
        return out

    def cells(self) -> list[tuple]:
        """(arch, regularizer, lambda, seed) in grid order; 'none' contributes one lambda."""
        out = []
        for arch in self.architectures:
            for reg in self.regularizers:
                lams = [0.0] if reg == "none" else list(self.lambdas)
                for lam in lams:
                    for seed in self.seeds:
                        out.append((list(arch), reg, float(lam), int(seed)))
        return out


def arch_name(dims) -> str:
    return "-".join(map(str, dims))


def output_dir(cfg_dir: str) -> str:
    return os.environ.get(OUTPUT_ENV) or cfg_dir


def _train_cell(args):
    cfg, arch, reg, lam, seed, out = args
    mode = "pinball" if cfg.benchmark == "synth-quantile" else "mse"
    tc = TrainConfig(
        dims=arch,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=seed,
        reg=cfg.reg_config(reg, lam),
        lr=cfg.lr,
        mode=mode,
        benchmark=cfg.benchmark,
        n_samples=cfg.n_samples,
        test_fraction=cfg.test_fraction,
        n_quantiles=cfg.n_quantiles,
    )
    tr, te = make_dataset(tc)
    net, rep = train(tc, tr, te)
    stem = f"{cfg.benchmark}_{arch_name(arch)}_{reg}_{lam:g}_s{seed}"
    path = os.path.join(out, "models", stem + ".model")
    netmod.save(net, path)
    meta = {
        "benchmark": cfg.benchmark,
        "arch": arch_name(arch),
        "regularizer": reg,
        "lambda": lam,
        "seed": seed,
        "box_lb": tr.box.lb.tolist(),
        "box_ub": tr.box.ub.tolist(),
        "binary": cfg.benchmark == "synth-quantile",
        "taus": None if tr.taus is None else tr.taus.tolist(),
    }
    with open(os.path.join(out, "models", stem + ".json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return {
        "schema_version": SCHEMA_VERSION,
        "benchmark": cfg.benchmark,
        "arch": arch_name(arch),
        "regularizer": reg,
        "lambda": lam,
        "seed": seed,
        "train_loss": repr(rep.train_loss),
        "test_loss": repr(rep.test_loss),
        "unstable": rep.unstable,
        "mean_width": repr(rep.mean_width),
        "time_s": f"{rep.wall_time:.6f}",
        "model": os.path.relpath(path, out),
    }


def run_train(cfg: ExperimentConfig) -> str:
    """Train every grid cell; returns the path of the training CSV."""
    out = output_dir(cfg.output_dir)
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    jobs = [(cfg, a, r, l, s, out) for a, r, l, s in cfg.cells()]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            rows = list(pool.map(_train_cell, jobs))
    else:
        rows = [_train_cell(j) for j in jobs]
    path = os.path.join(out, "train.csv")
    write_csv(path, rows, TRAIN_FIELDS)
    return path


def write_csv(path, rows, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_meta(model_path: str) -> dict:
    side = os.path.splitext(model_path)[0] + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            return json.load(fh)
    return {}


def optimize_model(
    path: str,
    sense: str = "min",
    time_limit: float = 60.0,
    node_limit=None,
    objective=None,
    box: Box | None = None,
    binary: bool | None = None,
    heuristic_samples: int = 256,
) -> dict:
    """One results row; failures are reported in the status column."""
    meta = {}
    try:
        net = netmod.load(path)
        meta = read_meta(path)
        if box is None:
            if "box_lb" not in meta:
                raise ValueError("no input box (sidecar .json missing and no --box given)")
            box = Box(meta["box_lb"], meta["box_ub"])
        is_bin = meta.get("binary", False) if binary is None else binary
        spec = MilpSpec(
            net,
            box,
            objective=objective,
            sense=sense,
            binary=is_bin,
            time_limit=time_limit,
            node_limit=node_limit,
            heuristic_samples=heuristic_samples,
        )
        prof = propagate_ibp(net, box)
        res = solve_milp(spec, prof)
        row = result_row(res, meta.get("seed", ""), meta.get("arch", arch_name(net.dims)),
                         meta.get("regularizer", ""), meta.get("lambda", ""), len(prof.unstable))
        row["best_bound"] = repr(res.best_bound)
    except Exception as e:  # keep going: one bad file must not stop the batch
        row = result_row(None, meta.get("seed", ""), meta.get("arch", ""), meta.get("regularizer", ""),
                         meta.get("lambda", ""), "", status=f"error: {type(e).__name__}: {e}")
        row["best_bound"] = ""
    row["benchmark"] = meta.get("benchmark", "")
    row["model"] = path
    return row


def run_optimize(paths, out_path, **kw) -> list[dict]:
    rows = [optimize_model(p, **kw) for p in paths]
    write_csv(out_path, rows, OPT_FIELDS)
    return rows


# ------------------------------------------------------------------- report


KEYS = ("benchmark", "arch", "regularizer", "lambda")


def read_rows(paths) -> tuple[list[str], list[dict]]:
    header, rows = None, []
    for p in paths:
        with open(p, newline="") as fh:
            r = csv.DictReader(fh)
            h = r.fieldnames or []
            if header is None:
                header = h
                for k in ("schema_version",) + KEYS:
                    if k not in h:
                        raise ValueError(f"{p}: missing column {k!r}")
            elif h != header:
                missing = [c for c in header if c not in h] + [c for c in h if c not in header]
                raise ValueError(f"{p}: schema mismatch in column {missing[0] if missing else h[0]!r}")
            rows.extend(r)
    if header is None:
        raise ValueError("no input files")
    return header, rows


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def summarize(header, rows) -> tuple[list[str], list[dict]]:
    """Mean and sample std per group, plus ratios against the unregularized baseline."""
    metrics = [c for c in header if c not in KEYS + ("schema_version", "seed", "model", "status")]
    metrics = [c for c in metrics if any(_num(r[c]) is not None for r in rows)]
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in KEYS), []).append(r)
    stats = {}
    for key, rs in groups.items():
        s = {"n": len(rs)}
        for m in metrics:
            v = np.array([_num(r[m]) for r in rs if _num(r[m]) is not None])
            s[m + "_mean"] = float(v.mean()) if v.size else float("nan")
            s[m + "_std"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        stats[key] = s
    ratio_cols = [m for m in ("test_loss", "time_s") if m in metrics]
    out = []
    for key, s in stats.items():
        base = stats.get((key[0], key[1], "none", _baseline_lambda(stats, key)))
        row = dict(zip(KEYS, key))
        row["schema_version"] = SCHEMA_VERSION
        row.update(s)
        for m in ratio_cols:
            b = base[m + "_mean"] if base else float("nan")
            row[m + "_ratio"] = s[m + "_mean"] / b if base and b != 0 else float("nan")
        out.append(row)
    # per-architecture mean of per-benchmark ratios
    by_arch: dict = {}
    for row in out:
        by_arch.setdefault((row["arch"], row["regularizer"], row["lambda"]), []).append(row)
    for (arch, reg, lam), rs in by_arch.items():
        agg = {"benchmark": "ALL", "arch": arch, "regularizer": reg, "lambda": lam, "schema_version": SCHEMA_VERSION}
        agg["n"] = sum(r["n"] for r in rs)
        for m in ratio_cols:
            agg[m + "_ratio"] = float(np.mean([r[m + "_ratio"] for r in rs]))
        out.append(agg)
    fields = ["schema_version", *KEYS, "n"]
    for m in metrics:
        fields += [m + "_mean", m + "_std"]
    fields += [m + "_ratio" for m in ratio_cols]
    return fields, out


def _baseline_lambda(stats, key):
    for k in stats:
        if k[0] == key[0] and k[1] == key[1] and k[2] == "none":
            return k[3]
    return None


def run_report(patterns, out_path) -> list[dict]:
    paths = sorted({p for pat in patterns for p in glob.glob(pat)})
    header, rows = read_rows(paths)
    fields, out = summarize(header, rows)
    write_csv(out_path, out, fields)
    return out


# --------------------------------------------------------------- trend run


def trend_experiment(
    benchmark: str = "peaks",
    dims=(2, 25, 25, 1),
    lam: float = 1e-3,
    seeds=(0, 1, 2),
    n_samples: int = 20000,
    epochs: int = 50,
    heuristic_samples: int = 2000,
    node_limit: int | None = 1,
    log=None,
) -> dict:
    """Baseline versus bound-width training: mean |U|, root LP gap and test MSE per arm."""
    arms = {"none": RegularizerConfig(), "bw": RegularizerConfig(bw=lam)}
    out = {}
    for name, reg in arms.items():
        U, gaps, mse, times = [], [], [], []
        for seed in seeds:
            tc = TrainConfig(list(dims), epochs=epochs, seed=seed, reg=reg, benchmark=benchmark, n_samples=n_samples)
            tr, te = make_dataset(tc)
            net, rep = train(tc, tr, te)
            prof = propagate_ibp(net, tr.box)
            res = solve_milp(MilpSpec(net, tr.box, heuristic_samples=heuristic_samples, node_limit=node_limit, seed=seed), prof)
            U.append(len(prof.unstable))
            gaps.append(res.root_lp_gap)
            mse.append(rep.test_loss)
            times.append(rep.wall_time)
            if log:
                log(f"{name} seed={seed} |U|={U[-1]} root_gap={gaps[-1]:.4f} test_mse={mse[-1]:.5f}")
        out[name] = {
            "unstable": float(np.mean(U)),
            "root_lp_gap": float(np.mean(gaps)),
            "test_mse": float(np.mean(mse)),
            "train_time": float(np.mean(times)),
        }
    return out
