"""Command line: ``tractnet train|optimize|gradcheck|report|bench``."""
from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from . import experiments as ex
from .bounds import Box
from .gradcheck import check_lp_duals, check_regularizers


def _parse_objective(text: str | None):
    if text is None or text == "output":
        return None
    if text.startswith("output:"):
        return int(text.split(":", 1)[1])
    if text.startswith("weights:"):
        path = text.split(":", 1)[1]
        w = np.loadtxt(path, delimiter=",", ndmin=1)
        return w.reshape(-1)
    raise argparse.ArgumentTypeError(f"objective must be output, output:<k> or weights:<csv>, got {text!r}")


def _parse_box(text: str | None):
    if text is None:
        return None
    lo, hi = (np.array([float(v) for v in part.split(",")]) for part in text.split(":"))
    return Box(lo, hi)


def cmd_train(args) -> int:
    try:
        cfg = ex.ExperimentConfig.load(args.config)
    except (OSError, ex.ConfigError, TypeError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    if args.workers:
        cfg.workers = args.workers
    path = ex.run_train(cfg)
    print(f"wrote {path}")
    return 0


def cmd_optimize(args) -> int:
    paths = sorted(glob.glob(args.models)) or [args.models]
    out = args.out or os.path.join(ex.output_dir("."), "optimize.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    rows = ex.run_optimize(
        paths,
        out,
        sense=args.sense,
        time_limit=args.time_limit,
        node_limit=args.node_limit,
        objective=_parse_objective(args.objective),
        box=_parse_box(args.box),
        binary=True if args.binary else None,
        heuristic_samples=args.heuristic_samples,
    )
    for r in rows:
        print(f"{r['model']}: status={r['status']} objective={r['objective']} nodes={r['nodes']}")
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    reg = check_regularizers(seed=args.seed, n_nets=args.nets)
    for name in reg.checked:
        print(
            f"reg_{name}: checked={reg.checked[name]} skipped_near_kink={reg.skipped[name]} "
            f"max_rel_err={reg.max_rel[name]:.3g}"
        )
    duals = check_lp_duals(seed=args.seed, n_cases=args.lp_cases)
    print(
        f"lp duals: probes={duals.probes} checked={duals.nondegenerate} skipped_degenerate={duals.skipped} "
        f"max_abs_err={duals.max_err:.3g}"
    )
    failures = reg.failures + duals.failures
    for f in failures:
        print(f"FAIL {f}")
    if duals.nondegenerate_fraction < 0.8:
        print(f"FAIL lp duals: only {duals.nondegenerate_fraction:.0%} of probes non-degenerate")
    ok = not failures and duals.ok
    print("gradcheck: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def cmd_report(args) -> int:
    try:
        rows = ex.run_report(args.inputs, args.out)
    except ValueError as e:
        print(f"report: {e}", file=sys.stderr)
        return 2
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_bench(args) -> int:
    if args.quick:
        kw = dict(seeds=(0,), n_samples=2000, epochs=5)
    else:
        kw = dict(seeds=(0, 1, 2), n_samples=20000, epochs=50)
    res = ex.trend_experiment(log=print, **kw)
    b, r = res["none"], res["bw"]
    print(f"baseline: |U|={b['unstable']:.1f} root_gap={b['root_lp_gap']:.3f} test_mse={b['test_mse']:.5f}")
    print(f"bw 1e-3:  |U|={r['unstable']:.1f} root_gap={r['root_lp_gap']:.3f} test_mse={r['test_mse']:.5f}")
    out = os.path.join(ex.output_dir("."), "bench.csv")
    ex.write_csv(
        out,
        [{"schema_version": ex.SCHEMA_VERSION, "arm": k, **v} for k, v in res.items()],
        ["schema_version", "arm", "unstable", "root_lp_gap", "test_mse", "train_time"],
    )
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tractnet",
        description="Train ReLU surrogates with tractability regularizers and solve their MILP embeddings.",
        epilog=f"Set {ex.OUTPUT_ENV} to override every output directory.",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train every (arch, regularizer, lambda, seed) cell of a YAML config")
    t.add_argument("--config", required=True, help="YAML experiment config")
    t.add_argument("--workers", type=int, default=None, help="worker processes (overrides the config)")
    t.set_defaults(fn=cmd_train)

    o = sub.add_parser("optimize", help="solve the MILP embedding of saved models")
    o.add_argument("--models", required=True, help="model file or glob")
    o.add_argument("--sense", choices=("min", "max"), default="min")
    o.add_argument("--time-limit", type=float, default=60.0, help="seconds per model")
    o.add_argument("--node-limit", type=int, default=None)
    o.add_argument(
        "--objective", default="output", help="output (single output), output:<k>, or weights:<csv file>"
    )
    o.add_argument("--box", default=None, help="input box lo1,lo2,...:hi1,hi2,... (default: model sidecar); write --box=-1,... for negative bounds")
    o.add_argument("--binary", action="store_true", help="treat every input as binary")
    o.add_argument("--heuristic-samples", type=int, default=256, help="random inputs tried for the first incumbent")
    o.add_argument("--out", default=None, help="results CSV (default <output dir>/optimize.csv)")
    o.set_defaults(fn=cmd_optimize)

    g = sub.add_parser("gradcheck", help="finite-difference checks of regularizer and LP dual gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nets", type=int, default=50, help="random networks for the regularizer checks")
    g.add_argument("--lp-cases", type=int, default=100, help="random fixed-input LPs for the dual check")
    g.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("report", help="aggregate result CSVs over seeds")
    r.add_argument("--in", dest="inputs", nargs="+", required=True, help="CSV files or globs")
    r.add_argument("--out", required=True, help="summary CSV")
    r.set_defaults(fn=cmd_report)

    b = sub.add_parser("bench", help="baseline vs bound-width trend experiment on peaks (2-25-25-1)")
    b.add_argument("--quick", action="store_true", help="1 seed, 2000 samples, 5 epochs")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
