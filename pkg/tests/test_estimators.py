import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flad.data import gen_synthetic
from flad.estimators import AutoencoderDetector, FLADClassifier, MLPClassifier, PCADetector


@pytest.fixture(scope="module")
def blobs():
    ds = gen_synthetic(2, 150, 6, 0.8, 0.1, seed=0)
    return ds.features, ds.labels


def test_mlp_fit_predict(blobs):
    X, y = blobs
    labels = np.where(y == 0, "cat", "dog")
    clf = MLPClassifier(epochs=30).fit(X, labels)
    assert set(clf.predict(X)) <= {"cat", "dog"}
    assert clf.score(X, labels) > 0.95
    np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)


def test_params_round_trip():
    est = FLADClassifier(rounds=3, sf=1.5)
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(sf=2.5).sf == 2.5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        PCADetector().transform(np.zeros((2, 3)))


def test_autoencoder_detector_flags_off_manifold(blobs):
    X, _ = blobs
    det = AutoencoderDetector(epochs=100).fit(X[::2], X_calib=X[1::2])
    assert det.transform(X).shape == X.shape
    far = np.full((5, X.shape[1]), 1.0)
    assert np.all(det.predict(far) == -1)
    assert np.mean(det.predict(X[1::2]) == 1) > 0.9


def test_pca_detector_inverse(blobs):
    X, _ = blobs
    det = PCADetector(n_components=6).fit(X)
    np.testing.assert_allclose(det.inverse_transform(det.transform(X)), X, atol=1e-10)
    assert np.all(det.score_samples(X) < 1e-10)


def test_flad_classifier_excludes_flipped_clients(blobs):
    X, y = blobs
    order = np.random.default_rng(0).permutation(len(X))
    tr, ref, cal = order[:200], order[200:260], order[260:]
    y_bad = y.copy()
    y_bad[tr[:40]] = 1 - y_bad[tr[:40]]
    groups = np.empty(len(X), int)
    groups[tr] = np.arange(200) // 20
    clf = FLADClassifier(rounds=4, ae_epochs=100)
    clf.fit(X[tr], y_bad[tr], groups=groups[tr], X_ref=X[ref], y_ref=y[ref],
            X_calib=X[cal], y_calib=y[cal])
    flags = clf.flag_matrix()
    assert flags.shape == (4, 10)
    assert flags[:, :2].all() and not flags[:, 2:].any()
    assert clf.predict(X[:3]).shape == (3,)


def test_flad_classifier_needs_groups(blobs):
    X, y = blobs
    with pytest.raises(ValueError):
        FLADClassifier().fit(X, y)
