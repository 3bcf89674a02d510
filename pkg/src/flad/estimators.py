"""scikit-learn style wrappers around the numpy core.

The wrappers own input validation and label encoding; all numerical work is
delegated to :mod:`flad.nn`, :mod:`flad.detection` and :mod:`flad.federation`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .data import Dataset
from .detection import Sensitivity, pca_fit, pca_residuals, recon_baseline_from_samples
from .federation import (ClientState, FederatedData, RoundConfig, autoencoder_bottleneck,
                         classifier_config, run_flad)


def _encode(y):
    classes, encoded = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    return classes, encoded.astype(np.int64)


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """One-hidden-layer relu classifier trained with mini-batch Adam or SGD."""

    def __init__(self, hidden=32, lr=0.001, batch_size=64, epochs=10, optimizer="adam",
                 random_state=0):
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = _encode(y)
        self.n_features_in_ = X.shape[1]
        init_ss, train_ss = np.random.SeedSequence(self.random_state).spawn(2)
        config = classifier_config(X.shape[1], self.classes_.size, self.hidden)
        model = nn.init_model(config, init_ss)
        self.model_ = nn.train_local(model, X, encoded, lr=self.lr, bs=self.batch_size,
                                     epochs=self.epochs, seed=train_ss, optimizer=self.optimizer)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return nn.forward(self.model_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class AutoencoderDetector(OutlierMixin, TransformerMixin, BaseEstimator):
    """Tanh autoencoder fitted on clean data; flags high reconstruction error.

    ``predict`` follows the scikit-learn outlier convention: -1 for anomalies.
    The threshold is ``mu + beta * sigma`` of the per-sample errors on the data
    passed to ``fit`` (or to ``X_calib`` when given).
    """

    def __init__(self, hidden=64, bottleneck=None, lr=0.001, batch_size=64, epochs=200,
                 beta=2.0, random_state=0):
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.beta = beta
        self.random_state = random_state

    def fit(self, X, y=None, X_calib=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        width = self.bottleneck or autoencoder_bottleneck(X.shape[1])
        init_ss, train_ss = np.random.SeedSequence(self.random_state).spawn(2)
        ae = nn.init_autoencoder(X.shape[1], self.hidden, width, seed=init_ss)
        self.ae_ = nn.train_local(ae, X, X, lr=self.lr, bs=self.batch_size, epochs=self.epochs,
                                  seed=train_ss, loss="mse")
        calib = X if X_calib is None else check_array(X_calib, dtype=np.float64,
                                                      ensure_min_samples=2)
        self.baseline_ = recon_baseline_from_samples(self.ae_, calib, chunk=1)
        return self

    def transform(self, X):
        check_is_fitted(self, "ae_")
        return nn.reconstruct(self.ae_, check_array(X, dtype=np.float64))

    def score_samples(self, X):
        """Per-sample mean squared reconstruction error (higher is more anomalous)."""
        X = check_array(X, dtype=np.float64)
        return np.mean((X - self.transform(X)) ** 2, axis=1)

    def decision_function(self, X):
        base = self.baseline_
        return base.mu_r + self.beta * base.sigma_r - self.score_samples(X)

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)


class PCADetector(TransformerMixin, BaseEstimator):
    """Residual-norm anomaly score against a rank-``n_components`` subspace."""

    def __init__(self, n_components=None, random_state=0):
        self.n_components = n_components
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        r = self.n_components or autoencoder_bottleneck(X.shape[1])
        self.pca_ = pca_fit(X, min(r, *X.shape), seed=self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "pca_")
        X = check_array(X, dtype=np.float64)
        return (X - self.pca_.mean) @ self.pca_.components.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "pca_")
        return np.asarray(Z, dtype=np.float64) @ self.pca_.components + self.pca_.mean

    def score_samples(self, X):
        check_is_fitted(self, "pca_")
        return pca_residuals(self.pca_, check_array(X, dtype=np.float64))


class FLADClassifier(ClassifierMixin, BaseEstimator):
    """Federated classifier trained with per-round anomaly screening.

    ``groups`` assigns each training sample to a client. ``X_ref``/``y_ref``
    are the server's clean reference data; ``X_calib`` (optional, clean and
    disjoint from the reference) calibrates the reconstruction channel and is
    also the evaluation set recorded in ``reports_``. Features must lie in [0, 1].
    """

    def __init__(self, rounds=20, lr=0.001, batch_size=64, local_epochs=1, sf=2.0,
                 detection=True, combine="or", hidden=32, optimizer="adam",
                 lr_schedule="constant", ae_epochs=200, random_state=0):
        self.rounds = rounds
        self.lr = lr
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.sf = sf
        self.detection = detection
        self.combine = combine
        self.hidden = hidden
        self.optimizer = optimizer
        self.lr_schedule = lr_schedule
        self.ae_epochs = ae_epochs
        self.random_state = random_state

    def fit(self, X, y, groups=None, X_ref=None, y_ref=None, X_calib=None, y_calib=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if groups is None or X_ref is None or y_ref is None:
            raise ValueError("fit needs groups, X_ref and y_ref")
        groups = np.asarray(groups)
        if groups.shape != (X.shape[0],):
            raise ValueError("groups must have one entry per sample")
        X_ref, y_ref = check_X_y(X_ref, y_ref, dtype=np.float64)
        self.classes_, encoded = _encode(np.concatenate([y, y_ref]))
        k = self.classes_.size
        y_enc, ref_enc = encoded[:len(y)], encoded[len(y):]
        self.n_features_in_ = X.shape[1]

        train = Dataset(X, y_enc, k)
        reference = Dataset(X_ref, ref_enc, k)
        calibration = None
        if X_calib is not None:
            X_calib, y_calib = check_X_y(X_calib, y_calib, dtype=np.float64)
            calibration = Dataset(X_calib, np.searchsorted(self.classes_, y_calib), k)
        self.client_ids_ = np.unique(groups)
        clients = [ClientState(i, np.flatnonzero(groups == g))
                   for i, g in enumerate(self.client_ids_)]
        data = FederatedData(train, clients, reference, calibration or reference, calibration)

        sens = Sensitivity.from_sf(self.sf) if self.detection else Sensitivity.disabled()
        cfg = RoundConfig(n_clients=len(clients), rounds=self.rounds, lr=self.lr,
                          bs=self.batch_size, local_epochs=self.local_epochs, sens=sens,
                          lr_schedule=self.lr_schedule, seed=self.random_state,
                          optimizer=self.optimizer, combine=self.combine,
                          ae_epochs=self.ae_epochs)
        self.model_, self.reports_ = run_flad(data, cfg, hidden=self.hidden)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return nn.forward(self.model_, check_array(X, dtype=np.float64))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def flag_matrix(self):
        """Boolean (rounds, clients) matrix of exclusion decisions."""
        check_is_fitted(self, "reports_")
        return np.array([[v.flagged for v in r.verdicts] for r in self.reports_])


__all__ = ["MLPClassifier", "AutoencoderDetector", "PCADetector", "FLADClassifier"]
