"""Federated training with per-round anomaly screening.

Every round each client trains a copy of the global model, the server scores
the client on both channels, drops flagged clients and applies the
size-weighted mean of the remaining updates.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn
from .data import Dataset
from .detection import (AnomalyVerdict, GradientStats, ReconBaseline, Sensitivity,
                        baseline_from_errors, calibrate_recon_baseline, detect_anom,
                        grad_deviation, recon_baseline_from_samples, recon_error,
                        round_stats)
from .metrics import accuracy

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "inv_sqrt_T")


@dataclass(frozen=True)
class RoundConfig:
    n_clients: int
    rounds: int
    lr: float = 0.001
    bs: int = 64
    local_epochs: int = 1
    sens: Sensitivity = field(default_factory=Sensitivity)
    lr_schedule: str = "constant"
    seed: int = 0
    optimizer: str = "adam"
    combine: str = "or"
    ae_mode: str = "server_ref"
    grad_score: str = "deviation"
    robust_stats: bool = True
    ae_epochs: int = 200
    ae_local_epochs: int = 20
    recon_chunk: int | None = None
    recon_calibration: str = "samples"

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.bs < 1 or self.local_epochs < 0:
            raise ValueError("bs must be >= 1 and local_epochs >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.combine not in ("or", "and"):
            raise ValueError(f"unknown combine rule {self.combine!r}")
        if self.ae_mode not in ("server_ref", "per_client"):
            raise ValueError(f"unknown ae_mode {self.ae_mode!r}")
        if self.grad_score not in ("deviation", "raw_norm"):
            raise ValueError(f"unknown grad_score {self.grad_score!r}")
        if self.recon_calibration not in ("samples", "chunks"):
            raise ValueError(f"unknown recon_calibration {self.recon_calibration!r}")

    def round_lr(self) -> float:
        if self.lr_schedule == "inv_sqrt_T":
            return self.lr / math.sqrt(self.rounds)
        return self.lr


@dataclass(frozen=True)
class ClientState:
    id: int
    indices: np.ndarray
    is_malicious: bool = False

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValueError(f"client {self.id} has no data")


@dataclass
class FederatedData:
    """Everything a run needs: poisoned client pool, clean server-side data.

    ``calibration`` is clean data disjoint from ``reference``; the detector
    autoencoder is fitted on the reference and calibrated on it.
    """
    train: Dataset
    clients: list
    reference: Dataset
    test: Dataset
    calibration: Dataset | None = None

    def client_data(self, client: ClientState) -> Dataset:
        return self.train.subset(client.indices)

    @property
    def client_union(self) -> Dataset:
        idx = np.sort(np.concatenate([c.indices for c in self.clients]))
        return self.train.subset(idx)


@dataclass
class ServerState:
    model: nn.Model
    detector_ae: nn.Autoencoder
    recon_base: ReconBaseline
    reference: Dataset


class LocalUpdate(NamedTuple):
    model: nn.Model
    delta: np.ndarray
    grad_score: float
    recon_score: float


@dataclass
class RoundReport:
    round: int
    verdicts: list
    accepted: list
    global_loss: float
    global_accuracy: float
    poisoned_eval_accuracy: float
    grad_scores: np.ndarray
    recon_scores: np.ndarray
    grad_stats: GradientStats
    empty_accepted: bool = False

    @property
    def n_flagged(self) -> int:
        return sum(v.flagged for v in self.verdicts)


def classifier_config(d_in: int, k: int, hidden: int = 32) -> nn.MlpConfig:
    return nn.MlpConfig((d_in, hidden, k), "relu", "softmax_logits")


def autoencoder_bottleneck(d_in: int) -> int:
    return max(1, min(16, d_in // 2))


def client_seed(seed: int, client_id: int, rnd: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, client_id, rnd])


def model_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 0xC1A55])


def ae_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 0xAE])


def n_workers(n_tasks: int) -> int:
    env = os.environ.get("FLAD_THREADS", "").strip()
    cap = int(env) if env else 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def _map(fn, items):
    workers = n_workers(len(items))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _train_client_ae(features: np.ndarray, cfg: RoundConfig, seed) -> nn.Autoencoder:
    init_ss, train_ss = seed.spawn(2)
    ae = nn.init_autoencoder(features.shape[1], bottleneck=autoencoder_bottleneck(features.shape[1]),
                             seed=init_ss)
    return nn.train_local(ae, features, features, lr=0.001, bs=cfg.bs,
                          epochs=cfg.ae_local_epochs, seed=train_ss, loss="mse")


def reference_gradient(server: ServerState) -> np.ndarray:
    ref = server.reference
    return nn.backward(server.model, ref.features, ref.labels, "cross_entropy")


def local_update(client: ClientState, server: ServerState, data: FederatedData,
                 cfg: RoundConfig, rnd: int, grad_ref: np.ndarray | None = None) -> LocalUpdate:
    local_data = data.client_data(client)
    x, y = local_data.features, local_data.labels
    ss = client_seed(cfg.seed, client.id, rnd)
    train_ss, ae_ss = ss.spawn(2)
    local = nn.train_local(server.model, x, y, lr=cfg.round_lr(), bs=cfg.bs,
                           epochs=cfg.local_epochs, seed=train_ss, optimizer=cfg.optimizer)
    delta = local.params - server.model.params

    grad_local = nn.backward(local, x, y, "cross_entropy")
    if cfg.grad_score == "raw_norm":
        grad_score = nn.l2_norm(grad_local)
    else:
        if grad_ref is None:
            grad_ref = reference_gradient(server)
        grad_score = grad_deviation(grad_local, grad_ref)

    if cfg.ae_mode == "per_client":
        recon_score = recon_error(_train_client_ae(x, cfg, ae_ss), x)
    else:
        recon_score = recon_error(server.detector_ae, x)
    return LocalUpdate(local, delta, grad_score, recon_score)


def aggregate(deltas, sizes) -> np.ndarray:
    """Size-weighted mean of client updates."""
    if len(deltas) == 0 or len(deltas) != len(sizes):
        raise ValueError("aggregate needs equal-length, non-empty deltas and sizes")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("client sizes must be positive")
    weights = sizes / sizes.sum()
    out = np.zeros_like(np.asarray(deltas[0], dtype=np.float64))
    for w, d in zip(weights, deltas):
        out += w * np.asarray(d, dtype=np.float64)
    return out


def evaluate(model: nn.Model, dataset: Dataset) -> tuple[float, float]:
    loss = nn.cross_entropy_loss(nn.logits(model, dataset.features), dataset.labels)
    return loss, accuracy(model, dataset.features, dataset.labels)


def flad_round(server: ServerState, data: FederatedData, cfg: RoundConfig, rnd: int,
               poisoned_eval: Dataset | None = None) -> RoundReport:
    """One round: local updates, detection after a barrier, aggregation, evaluation."""
    clients = data.clients
    grad_ref = reference_gradient(server) if cfg.grad_score == "deviation" else None
    updates = _map(lambda c: local_update(c, server, data, cfg, rnd, grad_ref), clients)

    grad_scores = np.array([u.grad_score for u in updates])
    recon_scores = np.array([u.recon_score for u in updates])
    stats = round_stats(grad_scores, cfg.robust_stats)
    verdicts, accepted = [], []
    for client, upd in zip(clients, updates):
        g_flag, r_flag, flagged = detect_anom(upd.grad_score, grad_scores, upd.recon_score,
                                              server.recon_base, cfg.sens, cfg.combine,
                                              stats=stats)
        verdicts.append(AnomalyVerdict(client.id, rnd, upd.grad_score, upd.recon_score,
                                       g_flag, r_flag, flagged))
        if not flagged:
            accepted.append(client.id)

    empty = not accepted
    if empty:
        log.warning("round %d: every client flagged, global model left unchanged", rnd)
    else:
        keep = [i for i, v in enumerate(verdicts) if not v.flagged]
        agg = aggregate([updates[i].delta for i in keep], [len(clients[i].indices) for i in keep])
        server.model = server.model.with_params(server.model.params + agg)

    loss, acc = evaluate(server.model, data.test)
    if poisoned_eval is None:
        poisoned_eval = data.client_union
    _, p_acc = evaluate(server.model, poisoned_eval)
    return RoundReport(rnd, verdicts, accepted, loss, acc, p_acc, grad_scores, recon_scores,
                       stats, empty)


def setup_server(data: FederatedData, cfg: RoundConfig, hidden: int = 32,
                 model_config: nn.MlpConfig | None = None) -> ServerState:
    """Initialise the global model and train/calibrate the detector autoencoder on the reference.

    ``model_config`` overrides the default one-hidden-layer classifier.
    """
    ref = data.reference
    d_in, k = ref.d_in, ref.n_classes
    model_config = model_config or classifier_config(d_in, k, hidden)
    model = nn.init_model(model_config, model_seed(cfg.seed))

    init_ss, train_ss, calib_ss = ae_seed(cfg.seed).spawn(3)
    chunk = cfg.recon_chunk or _default_chunk(data)
    calib = data.calibration if data.calibration is not None and len(data.calibration) else ref
    if cfg.ae_mode == "per_client":
        # baseline: self-reconstruction error of AEs trained on clean reference chunks
        chunk = min(chunk, len(ref) // 2)
        order = np.random.default_rng(calib_ss).permutation(len(ref))
        n_chunks = len(ref) // chunk
        errors = []
        for i, ss in enumerate(train_ss.spawn(n_chunks)):
            part = ref.features[order[i * chunk:(i + 1) * chunk]]
            errors.append(recon_error(_train_client_ae(part, cfg, ss), part))
        base = baseline_from_errors(errors)
        ae = nn.init_autoencoder(d_in, bottleneck=autoencoder_bottleneck(d_in), seed=init_ss)
    else:
        ae = nn.init_autoencoder(d_in, bottleneck=autoencoder_bottleneck(d_in), seed=init_ss)
        ae = nn.train_local(ae, ref.features, ref.features, lr=0.001, bs=cfg.bs,
                            epochs=cfg.ae_epochs, seed=train_ss, loss="mse")
        if cfg.recon_calibration == "chunks":
            base = calibrate_recon_baseline(ae, calib.features, chunk, calib_ss)
        else:
            base = recon_baseline_from_samples(ae, calib.features, chunk)
    return ServerState(model, ae, base, ref)


def _default_chunk(data: FederatedData) -> int:
    sizes = [len(c.indices) for c in data.clients]
    return max(1, int(round(float(np.mean(sizes)))))


def run_flad(data: FederatedData, cfg: RoundConfig, server: ServerState | None = None,
             hidden: int = 32, model_config: nn.MlpConfig | None = None):
    """Run ``cfg.rounds`` rounds; returns ``(final_model, reports)``."""
    if server is None:
        server = setup_server(data, cfg, hidden, model_config)
    poisoned_eval = data.client_union
    reports = []
    for rnd in range(cfg.rounds):
        report = flad_round(server, data, cfg, rnd, poisoned_eval)
        log.info("round %d: loss=%.4f acc=%.4f flagged=%d", rnd, report.global_loss,
                 report.global_accuracy, report.n_flagged)
        reports.append(report)
    return server.model, reports


def run_fedavg(data: FederatedData, cfg: RoundConfig, hidden: int = 32,
               model_config: nn.MlpConfig | None = None) -> nn.Model:
    """Plain FedAvg with the same seed derivation and no screening."""
    ref = data.reference
    model_config = model_config or classifier_config(ref.d_in, ref.n_classes, hidden)
    model = nn.init_model(model_config, model_seed(cfg.seed))
    for rnd in range(cfg.rounds):
        deltas, sizes = [], []
        for client in data.clients:
            train_ss, _ = client_seed(cfg.seed, client.id, rnd).spawn(2)
            local_data = data.client_data(client)
            local = nn.train_local(model, local_data.features, local_data.labels,
                                   lr=cfg.round_lr(), bs=cfg.bs, epochs=cfg.local_epochs,
                                   seed=train_ss, optimizer=cfg.optimizer)
            deltas.append(local.params - model.params)
            sizes.append(len(client.indices))
        model = model.with_params(model.params + aggregate(deltas, sizes))
    return model
