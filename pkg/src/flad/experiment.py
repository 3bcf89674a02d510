"""Experiment configuration, assembly and output files."""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .data import (ClientPartition, Dataset, PoisonSpec, apply_poison, gen_synthetic,
                   holdout_split, load_idx, partition, reference_indices)
from .detection import Sensitivity, modified_zscore, pca_fit, pca_score, zscore
from .federation import (ClientState, FederatedData, RoundConfig, RoundReport,
                         autoencoder_bottleneck, run_flad)
from .metrics import confusion_counts, detection_rate, roc_curve

DETECTORS = ("combined", "grad", "recon", "pca")

ROUNDS_HEADER = ["round", "global_loss", "global_accuracy", "poisoned_eval_accuracy",
                 "n_flagged", "mean_grad_score", "mean_recon_score"]
VERDICTS_HEADER = ["round", "client", "is_malicious", "grad_score", "recon_score",
                   "grad_flag", "recon_flag", "flagged"]

# Canonical desk-scale experiment; every omitted config field falls back to these.
DEFAULTS: dict[str, Any] = {
    "dataset": {"kind": "synthetic", "k": 2, "per_class": 300, "d_in": 16,
                "class_sep": 0.8, "std": 0.1,
                "images_path": None, "labels_path": None, "subset_n": 2000},
    "partition": {"scheme": "iid", "alpha": 0.5},
    "poison": {"kind": "label_flip", "malicious_clients": [0, 1, 2], "poison_fraction": 1.0,
               "target_class": 0, "std": 0.0},
    "federation": {"N": 10, "R": 20, "lr": 0.001, "bs": 64, "local_epochs": 1,
                   "lr_schedule": "constant", "optimizer": "adam", "hidden": 32},
    "detection": {"enabled": True, "sf": 2.0, "alpha": None, "beta": None, "combine": "or",
                  "ae_mode": "server_ref", "grad_score": "deviation", "robust_stats": True,
                  "ae_epochs": 200, "recon_calibration": "samples"},
    "reference": {"m": 256},
    "eval": {"test_fraction": 0.6},
    "output_dir": "flad_out",
    "seed": 0,
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}" if field_name else message)


def _merge(defaults: dict, given: dict, prefix: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(prefix, f"expected an object, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in defaults:
            raise ConfigError(name, "unknown field")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, name)
        else:
            out[key] = value
    return out


def _require(cond: bool, field_name: str, message: str):
    if not cond:
        raise ConfigError(field_name, message)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, given: dict | None = None) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULTS, given or {}, ""))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            given = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}")
        return cls.from_dict(given)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Dotted-path overrides, e.g. ``with_overrides(**{"detection.sf": 3.0})``."""
        raw = copy.deepcopy(self.raw)
        for path, value in changes.items():
            node = raw
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(path, "unknown field")
            node[leaf] = value
        out = ExperimentConfig(raw)
        out.validate()
        return out

    def __getitem__(self, key):
        return self.raw[key]

    def validate(self) -> None:
        r = self.raw
        ds = r["dataset"]
        _require(ds["kind"] in ("synthetic", "mnist"), "dataset.kind", "must be synthetic or mnist")
        if ds["kind"] == "synthetic":
            _require(_is_int(ds["k"]) and ds["k"] >= 2, "dataset.k", "must be an integer >= 2")
            _require(_is_int(ds["per_class"]) and ds["per_class"] >= 1, "dataset.per_class",
                     "must be an integer >= 1")
            _require(_is_int(ds["d_in"]) and ds["d_in"] >= ds["k"], "dataset.d_in",
                     "must be an integer >= k")
            _require(_is_num(ds["class_sep"]), "dataset.class_sep", "must be a number")
            _require(_is_num(ds["std"]) and ds["std"] > 0, "dataset.std", "must be > 0")
        else:
            for key in ("images_path", "labels_path"):
                _require(isinstance(ds[key], str) and Path(ds[key]).is_file(),
                         f"dataset.{key}", f"file not found: {ds[key]!r}")
            _require(_is_int(ds["subset_n"]) and ds["subset_n"] >= 2, "dataset.subset_n",
                     "must be an integer >= 2")

        part = r["partition"]
        _require(part["scheme"] in ("iid", "dirichlet"), "partition.scheme",
                 "must be iid or dirichlet")
        _require(_is_num(part["alpha"]) and part["alpha"] > 0, "partition.alpha", "must be > 0")

        fed = r["federation"]
        _require(_is_int(fed["N"]) and fed["N"] >= 1, "federation.N", "must be an integer >= 1")
        _require(_is_int(fed["R"]) and fed["R"] >= 1, "federation.R", "must be an integer >= 1")
        _require(_is_num(fed["lr"]) and fed["lr"] > 0, "federation.lr", "must be > 0")
        _require(_is_int(fed["bs"]) and fed["bs"] >= 1, "federation.bs", "must be an integer >= 1")
        _require(_is_int(fed["local_epochs"]) and fed["local_epochs"] >= 0,
                 "federation.local_epochs", "must be an integer >= 0")
        _require(fed["lr_schedule"] in ("constant", "inv_sqrt_T"), "federation.lr_schedule",
                 "must be constant or inv_sqrt_T")
        _require(fed["optimizer"] in ("adam", "sgd"), "federation.optimizer", "must be adam or sgd")
        _require(_is_int(fed["hidden"]) and fed["hidden"] >= 1, "federation.hidden",
                 "must be an integer >= 1")

        po = r["poison"]
        _require(po["kind"] in ("none", "label_flip", "feature_noise"), "poison.kind",
                 "must be none, label_flip or feature_noise")
        _require(isinstance(po["malicious_clients"], list)
                 and all(_is_int(c) and 0 <= c < fed["N"] for c in po["malicious_clients"]),
                 "poison.malicious_clients", f"must be a list of client ids in [0, {fed['N']})")
        _require(_is_num(po["poison_fraction"]) and 0 <= po["poison_fraction"] <= 1,
                 "poison.poison_fraction", "must lie in [0, 1]")
        _require(_is_int(po["target_class"]) and po["target_class"] >= 0, "poison.target_class",
                 "must be a non-negative integer")
        _require(_is_num(po["std"]) and po["std"] >= 0, "poison.std", "must be >= 0")

        det = r["detection"]
        _require(isinstance(det["enabled"], bool), "detection.enabled", "must be true or false")
        _require(_is_num(det["sf"]) and det["sf"] >= 0, "detection.sf", "must be >= 0")
        for key in ("alpha", "beta"):
            _require(det[key] is None or (_is_num(det[key]) and det[key] >= 0),
                     f"detection.{key}", "must be null or >= 0")
        _require(det["combine"] in ("or", "and"), "detection.combine", "must be or/and")
        _require(det["ae_mode"] in ("server_ref", "per_client"), "detection.ae_mode",
                 "must be server_ref or per_client")
        _require(det["grad_score"] in ("deviation", "raw_norm"), "detection.grad_score",
                 "must be deviation or raw_norm")
        _require(isinstance(det["robust_stats"], bool), "detection.robust_stats",
                 "must be true or false")
        _require(_is_int(det["ae_epochs"]) and det["ae_epochs"] >= 0, "detection.ae_epochs",
                 "must be an integer >= 0")
        _require(det["recon_calibration"] in ("samples", "chunks"), "detection.recon_calibration",
                 "must be samples or chunks")

        _require(_is_int(r["reference"]["m"]) and r["reference"]["m"] >= 1, "reference.m",
                 "must be an integer >= 1")
        tf = r["eval"]["test_fraction"]
        _require(_is_num(tf) and 0 < tf < 1, "eval.test_fraction", "must lie in (0, 1)")
        _require(isinstance(r["output_dir"], str), "output_dir", "must be a string")
        _require(_is_int(r["seed"]) and r["seed"] >= 0, "seed", "must be a non-negative integer")

    def sensitivity(self) -> Sensitivity:
        det = self.raw["detection"]
        if not det["enabled"]:
            return Sensitivity.disabled()
        alpha = det["alpha"] if det["alpha"] is not None else det["sf"]
        beta = det["beta"] if det["beta"] is not None else det["sf"]
        return Sensitivity(float(alpha), float(beta))

    def round_config(self) -> RoundConfig:
        fed, det = self.raw["federation"], self.raw["detection"]
        return RoundConfig(n_clients=fed["N"], rounds=fed["R"], lr=float(fed["lr"]), bs=fed["bs"],
                           local_epochs=fed["local_epochs"], sens=self.sensitivity(),
                           lr_schedule=fed["lr_schedule"], seed=self.raw["seed"],
                           optimizer=fed["optimizer"], combine=det["combine"],
                           ae_mode=det["ae_mode"], grad_score=det["grad_score"],
                           robust_stats=det["robust_stats"], ae_epochs=det["ae_epochs"],
                           recon_calibration=det["recon_calibration"])


@dataclass
class Bundle:
    data: FederatedData
    parts: ClientPartition
    malicious: np.ndarray


def _seed(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream])


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds, seed = cfg["dataset"], cfg["seed"]
    if ds["kind"] == "synthetic":
        return gen_synthetic(ds["k"], ds["per_class"], ds["d_in"], ds["class_sep"], ds["std"],
                             seed=_seed(seed, 1))
    full = load_idx(ds["images_path"], ds["labels_path"])
    n = min(ds["subset_n"], len(full))
    return full.subset(reference_indices(full, n, _seed(seed, 2)))


def build_bundle(cfg: ExperimentConfig) -> Bundle:
    """Split held-out clean data, pick the reference, partition and poison the rest."""
    seed = cfg["seed"]
    dataset = load_dataset(cfg)
    train_idx, test_idx = holdout_split(dataset, cfg["eval"]["test_fraction"], _seed(seed, 3))
    test = dataset.subset(test_idx)
    m = cfg["reference"]["m"]
    if m > len(test):
        raise ConfigError("reference.m", f"{m} exceeds the {len(test)} held-out samples")
    ref_idx = reference_indices(test, m, _seed(seed, 4))
    reference = test.subset(ref_idx)
    calibration = test.subset(np.setdiff1d(np.arange(len(test)), ref_idx))

    train = dataset.subset(train_idx)
    fed = cfg["federation"]
    if fed["N"] > len(train):
        raise ConfigError("federation.N", f"{fed['N']} clients but only {len(train)} samples")
    p = cfg["partition"]
    parts = partition(train, fed["N"], p["scheme"], p["alpha"], seed=_seed(seed, 5))
    po = cfg["poison"]
    if po["kind"] == "label_flip" and po["target_class"] >= train.n_classes:
        raise ConfigError("poison.target_class", f"must be < {train.n_classes}")
    spec = PoisonSpec(po["kind"], tuple(po["malicious_clients"]), po["poison_fraction"],
                      po["target_class"], po["std"])
    poisoned, mask = apply_poison(train, parts, spec, seed=_seed(seed, 6))
    clients = [ClientState(c, parts[c], bool(mask.malicious[c])) for c in range(len(parts))]
    data = FederatedData(poisoned, clients, reference, test, calibration)
    return Bundle(data, parts, mask.malicious)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    bundle: Bundle
    final_model: Any
    reports: list
    recon_base: Any

    def truth(self) -> np.ndarray:
        """Ground-truth malicious flag per client-round, round-major."""
        return np.tile(self.bundle.malicious, len(self.reports))

    def flags(self) -> np.ndarray:
        return np.array([v.flagged for r in self.reports for v in r.verdicts])


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    from .federation import setup_server

    bundle = build_bundle(cfg)
    rc = cfg.round_config()
    server = setup_server(bundle.data, rc, cfg["federation"]["hidden"])
    base = server.recon_base
    final, reports = run_flad(bundle.data, rc, server)
    return ExperimentResult(cfg, bundle, final, reports, base)


def detector_scores(result: ExperimentResult, detector: str) -> tuple[np.ndarray, np.ndarray]:
    """Per client-round anomaly scores for a detector, with ground-truth labels.

    Gradient scores get a per-round median/MAD z-score, which a malicious minority
    cannot inflate the way it inflates the round standard deviation.
    Reconstruction scores are standardised against the clean baseline. The
    combined score is the larger of the two, matching the OR rule.
    """
    if detector not in DETECTORS:
        raise ValueError(f"unknown detector {detector!r}; choose from {', '.join(DETECTORS)}")
    labels = result.truth()
    if detector == "pca":
        return pca_client_scores(result.bundle, result.config), labels
    base = result.recon_base
    z_grad = np.concatenate([modified_zscore(r.grad_scores) for r in result.reports])
    z_recon = np.concatenate([zscore(r.recon_scores, base.mu_r, base.sigma_r)
                              for r in result.reports])
    if detector == "grad":
        return z_grad, labels
    if detector == "recon":
        return z_recon, labels
    return np.maximum(z_grad, z_recon), labels


def pca_client_scores(bundle: Bundle, cfg: ExperimentConfig) -> np.ndarray:
    """PCA residual of each client's data, fitted on the reference; repeated per round."""
    data = bundle.data
    rank = autoencoder_bottleneck(data.reference.d_in)
    rank = min(rank, len(data.reference))
    model = pca_fit(data.reference.features, rank, seed=_seed(cfg["seed"], 7))
    per_client = np.array([pca_score(model, data.client_data(c).features) for c in data.clients])
    return np.tile(per_client, cfg["federation"]["R"])


def summarize(result: ExperimentResult) -> dict:
    reports = result.reports
    flags, truth = result.flags(), result.truth()
    counts = confusion_counts(flags, truth)
    last = reports[-1]
    per_round = [r.n_flagged for r in reports]
    try:
        scores, labels = detector_scores(result, "combined")
        auc = roc_curve(scores, labels).auc
    except ValueError:
        auc = None
    return {
        "final_accuracy": last.global_accuracy,
        "final_loss": last.global_loss,
        "poisoned_eval_accuracy": last.poisoned_eval_accuracy,
        "detection_auc": auc,
        "tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
        "detection_rate": detection_rate(flags, truth),
        "false_positive_rate": counts.fpr,
        "anomalies_per_round": per_round,
        "total_anomalies": int(sum(per_round)),
        "rounds_with_anomalies": int(sum(1 for n in per_round if n > 0)),
        "empty_rounds": int(sum(r.empty_accepted for r in reports)),
        "mean_grad_score": float(np.mean([r.grad_scores.mean() for r in reports])),
        "mean_recon_score": float(np.mean([r.recon_scores.mean() for r in reports])),
        "n_clients": len(result.bundle.data.clients),
        "n_rounds": len(reports),
        "seed": result.config["seed"],
    }


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_run_outputs(result: ExperimentResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    malicious = result.bundle.malicious
    _write_csv(out / "rounds.csv", ROUNDS_HEADER,
               [(r.round, r.global_loss, r.global_accuracy, r.poisoned_eval_accuracy, r.n_flagged,
                 r.grad_scores.mean(), r.recon_scores.mean()) for r in result.reports])
    _write_csv(out / "verdicts.csv", VERDICTS_HEADER,
               [(v.round, v.client_id, malicious[v.client_id], v.grad_score, v.recon_score,
                 v.grad_flag, v.recon_flag, v.flagged)
                for r in result.reports for v in r.verdicts])
    summary = summarize(result)
    write_json(out / "summary.json", summary)
    return summary


def _json_default(x):
    if isinstance(x, (np.generic, np.ndarray)):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_roc(path, curve) -> None:
    _write_csv(Path(path), ["fpr", "tpr"], zip(curve.fpr, curve.tpr))


def write_sweep(out_dir, sweep) -> None:
    from .metrics import SWEEP_COLUMNS

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(SWEEP_COLUMNS)
    _write_csv(out / "sweep.csv", ["sf", "n_seeds"] + cols,
               [[row["sf"], row["n_seeds"]] + [row[c] for c in cols] for row in sweep.rows])
    _write_csv(out / "sweep_raw.csv", ["sf", "seed"] + cols,
               [[row["sf"], row["seed"]] + [row[c] for c in cols] for row in sweep.raw])


def roc_for(result: ExperimentResult, detector: str):
    scores, labels = detector_scores(result, detector)
    return roc_curve(scores, labels)


__all__ = ["ExperimentConfig", "ConfigError", "build_bundle", "run_experiment", "summarize",
           "detector_scores", "write_run_outputs", "write_sweep", "write_roc",
           "DETECTORS", "DEFAULTS"]
