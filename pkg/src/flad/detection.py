"""Per-client anomaly scoring: gradient deviation, reconstruction error, PCA baseline."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .nn import Autoencoder, l2_norm, mse_loss, reconstruct

DISABLED = math.inf

# Iglewicz-Hoaglin cut-off for the modified z-score pre-screen.
ROBUST_CUTOFF = 3.5


@dataclass(frozen=True)
class GradientStats:
    mu: float
    sigma: float

    def threshold(self, alpha: float) -> float:
        return self.mu + alpha * self.sigma


@dataclass(frozen=True)
class Sensitivity:
    alpha: float = 2.0
    beta: float = 2.0

    def __post_init__(self):
        if math.isnan(self.alpha) or math.isnan(self.beta) or self.alpha < 0 or self.beta < 0:
            raise ValueError("sensitivity factors must be >= 0")

    @classmethod
    def from_sf(cls, sf: float) -> "Sensitivity":
        return cls(sf, sf)

    @classmethod
    def disabled(cls) -> "Sensitivity":
        return cls(DISABLED, DISABLED)

    @property
    def is_disabled(self) -> bool:
        return math.isinf(self.alpha) and math.isinf(self.beta)


@dataclass(frozen=True)
class ReconBaseline:
    mu_r: float
    sigma_r: float


@dataclass(frozen=True)
class AnomalyVerdict:
    client_id: int
    round: int
    grad_score: float
    recon_score: float
    grad_flag: bool
    recon_flag: bool
    flagged: bool


def grad_deviation(grad_client, grad_ref) -> float:
    grad_client = np.asarray(grad_client, dtype=np.float64)
    grad_ref = np.asarray(grad_ref, dtype=np.float64)
    if grad_client.shape != grad_ref.shape:
        raise ValueError(f"gradient dimensions differ: {grad_client.shape} vs {grad_ref.shape}")
    return l2_norm(grad_client - grad_ref)


def population_stats(scores) -> GradientStats:
    """Mean and population standard deviation (divide by count)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("population_stats needs at least one score")
    mu = float(np.mean(scores))
    if np.all(scores == scores[0]):
        return GradientStats(mu, 0.0)
    return GradientStats(mu, float(np.sqrt(np.mean((scores - mu) ** 2))))


def modified_zscore(scores) -> np.ndarray:
    """Median/MAD standardised scores.

    When the MAD is zero the mean absolute deviation from the median stands in;
    if that is zero too every score maps to 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    med = np.median(scores)
    dev = np.abs(scores - med)
    mad = np.median(dev)
    scale = 1.4826 * mad if mad > 0 else 1.2533 * np.mean(dev)
    if scale == 0:
        return np.zeros(scores.shape)
    return (scores - med) / scale


def benign_mask(scores, cutoff: float = ROBUST_CUTOFF) -> np.ndarray:
    """Scores not rejected by a median/MAD pre-screen (upper tail only)."""
    return modified_zscore(scores) <= cutoff


def benign_population_stats(scores, cutoff: float = ROBUST_CUTOFF) -> GradientStats:
    """Mean/std over the scores that survive :func:`benign_mask`."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("benign_population_stats needs at least one score")
    return population_stats(scores[benign_mask(scores, cutoff)])


def round_stats(scores, robust: bool = True) -> GradientStats:
    return benign_population_stats(scores) if robust else population_stats(scores)


def _exceeds(score: float, mu: float, sigma: float, factor: float) -> bool:
    if factor < 0:
        raise ValueError("sensitivity factor must be >= 0")
    if math.isinf(factor):
        return False
    if sigma == 0:
        return score > mu
    return score > mu + factor * sigma


def flag_gradient_anomaly(score: float, stats: GradientStats, alpha: float) -> bool:
    return _exceeds(score, stats.mu, stats.sigma, alpha)


def recon_error(ae: Autoencoder, features) -> float:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("recon_error needs at least one sample")
    return mse_loss(features, reconstruct(ae, features))


def baseline_from_errors(errors) -> ReconBaseline:
    stats = population_stats(errors)
    return ReconBaseline(stats.mu, stats.sigma)


def calibrate_recon_baseline(ae: Autoencoder, clean, chunk: int, seed=None) -> ReconBaseline:
    """Reconstruction-error statistics over disjoint random chunks of clean data.

    ``clean`` is a feature matrix; leftover samples that do not fill a chunk are dropped.
    """
    clean = np.asarray(getattr(clean, "features", clean), dtype=np.float64)
    n = clean.shape[0]
    if chunk < 1 or n < 2 * chunk:
        raise ValueError(f"need at least {2 * chunk} clean samples for chunk={chunk}, have {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_chunks = n // chunk
    errors = [recon_error(ae, clean[order[i * chunk:(i + 1) * chunk]]) for i in range(n_chunks)]
    return baseline_from_errors(errors)


def recon_baseline_from_samples(ae: Autoencoder, clean, chunk: int) -> ReconBaseline:
    """Baseline for the error of a ``chunk``-sized client from per-sample errors.

    The chunk-mean error of i.i.d. clean samples has the per-sample mean and a
    standard deviation shrunk by ``sqrt(chunk)``; this needs far fewer clean
    samples than splitting into disjoint chunks.
    """
    clean = np.asarray(getattr(clean, "features", clean), dtype=np.float64)
    if chunk < 1 or clean.shape[0] < 2:
        raise ValueError("need chunk >= 1 and at least two clean samples")
    per_sample = np.mean((clean - reconstruct(ae, clean)) ** 2, axis=1)
    stats = population_stats(per_sample)
    return ReconBaseline(stats.mu, stats.sigma / np.sqrt(chunk))


def flag_recon_anomaly(err: float, base: ReconBaseline, beta: float) -> bool:
    return _exceeds(err, base.mu_r, base.sigma_r, beta)


def detect_anom(grad_score: float, all_grad_scores, recon_score: float, base: ReconBaseline,
                sens: Sensitivity, combine: str = "or", robust_stats: bool = True,
                stats: GradientStats | None = None) -> tuple[bool, bool, bool]:
    """Return ``(grad_flag, recon_flag, flagged)`` for one client.

    ``stats`` may be passed in to avoid recomputing the round statistics per client.
    """
    if stats is None:
        stats = round_stats(all_grad_scores, robust_stats)
    grad_flag = flag_gradient_anomaly(grad_score, stats, sens.alpha)
    recon_flag = flag_recon_anomaly(recon_score, base, sens.beta)
    if combine == "or":
        flagged = grad_flag or recon_flag
    elif combine == "and":
        flagged = grad_flag and recon_flag
    else:
        raise ValueError(f"unknown combine rule {combine!r}")
    return grad_flag, recon_flag, flagged


def zscore(score, mu: float, sigma: float):
    """Standardised score; with ``sigma == 0`` the sign of the offset decides (+/-inf or 0)."""
    score = np.asarray(score, dtype=np.float64)
    if sigma > 0:
        return (score - mu) / sigma
    return np.sign(score - mu) * np.where(score == mu, 0.0, np.inf)


# -- PCA baseline --------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def r(self) -> int:
        return self.components.shape[0]


def pca_fit(clean, r: int, tol: float = 1e-9, max_iter: int = 1000, seed=0) -> PcaModel:
    """Top-``r`` principal axes by power iteration with deflation.

    Each iterate is re-orthogonalised against the axes already found. Directions
    carrying no variance are not returned; ``rank_deficient`` is set instead.
    """
    x = np.asarray(getattr(clean, "features", clean), dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("pca_fit needs at least two samples")
    if not 1 <= r <= min(n, d):
        raise ValueError(f"rank r={r} must lie in [1, {min(n, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    floor = 1e-12 * max(np.trace(cov), np.finfo(float).tiny)
    rng = np.random.default_rng(seed)

    comps, variances = [], []
    deficient = False
    for _ in range(r):
        v = rng.normal(size=d)
        basis = np.array(comps).reshape(-1, d)
        v -= basis.T @ (basis @ v)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = cov @ v
            w -= basis.T @ (basis @ w)
            norm = np.linalg.norm(w)
            if norm <= floor:
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        if lam <= floor:
            deficient = True
            break
        comps.append(v)
        variances.append(lam)
        cov = cov - lam * np.outer(v, v)
    if deficient:
        warnings.warn(f"data has rank {len(comps)} < requested {r}; returning fewer components")
    components = np.array(comps).reshape(-1, d)
    return PcaModel(mean, components, np.array(variances), deficient)


def pca_residuals(model: PcaModel, features) -> np.ndarray:
    """Squared norm of each sample's off-subspace residual."""
    x = np.asarray(getattr(features, "features", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.mean.shape[0]:
        raise ValueError(f"expected features with {model.mean.shape[0]} columns, got {x.shape}")
    xc = x - model.mean
    resid = xc - (xc @ model.components.T) @ model.components
    return np.sum(resid ** 2, axis=1)


def pca_score(model: PcaModel, features) -> float:
    return float(np.mean(pca_residuals(model, features)))
