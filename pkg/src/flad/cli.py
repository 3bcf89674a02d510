"""Command-line driver: ``flad run|sweep|roc|gradcheck|gen-data``.

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import nn
from .data import gen_synthetic, write_csv
from .experiment import (DETECTORS, ConfigError, ExperimentConfig, build_bundle,
                         detector_scores, pca_client_scores, run_experiment, summarize,
                         write_json, write_roc, write_run_outputs, write_sweep)
from .metrics import UndefinedROCError, roc_curve, sweep_sensitivity

log = logging.getLogger("flad")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


# -- gradient check ------------------------------------------------------------

def _architectures():
    """(name, model factory, loss, target factory) for the standard check set."""
    def cls(sizes, act):
        return lambda ss: nn.init_model(nn.MlpConfig(sizes, act, "softmax_logits"), ss)

    def reg(sizes, act):
        return lambda ss: nn.init_model(nn.MlpConfig(sizes, act, "linear"), ss)

    def ae(ss):
        return nn.init_autoencoder(8, hidden=12, bottleneck=3, seed=ss)

    def labels(k):
        return lambda rng, n: rng.integers(0, k, size=n)

    def values(d):
        return lambda rng, n: rng.normal(size=(n, d))

    return [
        ("mlp-relu 5-8-3 ce", cls((5, 8, 3), "relu"), "cross_entropy", labels(3)),
        ("mlp-tanh 5-8-3 ce", cls((5, 8, 3), "tanh"), "cross_entropy", labels(3)),
        ("mlp-relu 6-10-6-4 ce", cls((6, 10, 6, 4), "relu"), "cross_entropy", labels(4)),
        ("linear 4-3 ce", cls((4, 3), "relu"), "cross_entropy", labels(3)),
        ("mlp-tanh 4-6-2 mse", reg((4, 6, 2), "tanh"), "mse", values(2)),
        ("autoencoder 8-12-3-12-8 mse", ae, "mse", None),
    ]


def relative_error(a, b) -> float:
    """Norm-wise relative error, guarded against two zero vectors."""
    scale = max(nn.l2_norm(a), nn.l2_norm(b), 1e-12)
    return nn.l2_norm(np.asarray(a) - np.asarray(b)) / scale


def gradcheck(n_seeds: int = 20, batch: int = 6) -> dict[str, float]:
    """Largest backward-vs-central-difference relative error per architecture."""
    report = {}
    for name, make, loss, make_target in _architectures():
        worst = 0.0
        for seed in range(n_seeds):
            model_ss, data_ss = np.random.SeedSequence([seed, 0x6C]).spawn(2)
            model = make(model_ss)
            rng = np.random.default_rng(data_ss)
            x = rng.uniform(size=(batch, model.d_in))
            target = x if make_target is None else make_target(rng, batch)
            exact = nn.backward(model, x, target, loss)
            approx = nn.finite_diff_gradient(model, x, target, loss)
            worst = max(worst, relative_error(exact, approx))
        report[name] = worst
    return report


# -- subcommands ---------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig.from_dict()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["output_dir"] = args.out_dir
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    summary = write_run_outputs(run_experiment(cfg), cfg["output_dir"])
    auc = summary["detection_auc"]
    print(f"final_accuracy={summary['final_accuracy']:.4f} "
          f"detection_auc={'n/a' if auc is None else f'{auc:.4f}'} "
          f"tp={summary['tp']} fp={summary['fp']} tn={summary['tn']} fn={summary['fn']}")
    print(f"wrote rounds.csv, verdicts.csv, summary.json to {cfg['output_dir']}")
    return 0


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--sf-grid: cannot parse {text!r}")
    if not grid or any(not np.isfinite(v) or v < 0 for v in grid):
        raise UsageError("--sf-grid needs one or more non-negative numbers")
    return grid


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = _parse_grid(args.sf_grid)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [cfg["seed"] + i for i in range(args.seeds)]

    def run(sf, seed):
        point = cfg.with_overrides(**{"detection.sf": sf, "seed": seed})
        return summarize(run_experiment(point))

    sweep = sweep_sensitivity(run, grid, seeds)
    write_sweep(cfg["output_dir"], sweep)
    for row in sweep.rows:
        print(f"sf={row['sf']:g} final_accuracy={row['final_accuracy']:.4f} "
              f"total_anomalies={row['total_anomalies']:.2f}")
    print(f"wrote sweep.csv, sweep_raw.csv to {cfg['output_dir']}")
    return 0


def cmd_roc(args) -> int:
    cfg = _load_config(args)
    if args.detector == "pca":
        # the baseline only scores client data; no federated training needed
        bundle = build_bundle(cfg)
        scores = pca_client_scores(bundle, cfg)
        labels = np.tile(bundle.malicious, cfg["federation"]["R"])
    else:
        scores, labels = detector_scores(run_experiment(cfg), args.detector)
    curve = roc_curve(scores, labels)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_roc(out / f"roc_{args.detector}.csv", curve)
    print(f"detector={args.detector} auc={curve.auc:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    report = gradcheck(args.n_seeds)
    elapsed = time.perf_counter() - start
    for name, err in report.items():
        print(f"{name:32s} max_rel_err={err:.3e}")
    worst = max(report.values())
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} over {args.n_seeds} seeds "
          f"({elapsed:.2f}s): {'PASS' if ok else 'FAIL'}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "gradcheck.json", {"max_relative_error": report, "tolerance": GRADCHECK_TOL})
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    try:
        ds = gen_synthetic(args.k, args.per_class, args.d_in, args.class_sep, args.std, seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    path = Path(args.out)
    if args.out_dir is not None and not path.is_absolute():
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        path = Path(args.out_dir) / path
    write_csv(ds, path)
    print(f"wrote {len(ds)} rows to {path}")
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out-dir", default=None, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")

    parser = argparse.ArgumentParser(prog="flad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.add_argument("config", nargs="?", help="JSON config (canonical defaults if omitted)")
        return p

    p = with_config("run", "run one experiment")
    p.set_defaults(func=cmd_run)
    p = with_config("sweep", "sweep the sensitivity factor")
    p.add_argument("--sf-grid", default="0.5,1,2,3")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_sweep)
    p = with_config("roc", "ROC curve for one detector")
    p.add_argument("--detector", choices=DETECTORS, default="combined")
    p.set_defaults(func=cmd_roc)
    p = sub.add_parser("gradcheck", help="backward vs finite differences", parents=[common])
    p.add_argument("--n-seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("gen-data", help="write a synthetic dataset CSV", parents=[common])
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--class-sep", type=float, default=0.8)
    p.add_argument("--std", type=float, default=0.1)
    p.add_argument("--out", default="synthetic.csv")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"flad: config error: {exc}", file=sys.stderr)
        return 2
    except UndefinedROCError as exc:
        print(f"flad: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"flad: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
