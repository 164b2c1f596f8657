import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from ota_fl_sim import OTAFederatedClassifier
from ota_fl_sim.datagen import gen_synthetic_classification


@pytest.fixture(scope="module")
def blobs():
    ds = gen_synthetic_classification(400, 4, 3, 4.0, seed=0)
    labels = np.array(["a", "b", "c"])[ds.labels]
    return ds.features, labels


def test_params_round_trip():
    est = OTAFederatedClassifier(variant="COTAF", n_clients=5, snr_db=None)
    params = est.get_params()
    assert params["variant"] == "COTAF" and params["snr_db"] is None
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(rounds=7)
    assert est.rounds == 7


def test_fit_predict_string_labels(blobs):
    X, y = blobs
    est = OTAFederatedClassifier(n_clients=5, rounds=15, random_state=1).fit(X, y)
    assert list(est.classes_) == ["a", "b", "c"]
    assert est.score(X, y) >= 0.9
    proba = est.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert len(est.history_) == 15 and est.coef_flat_.shape == (est.model_spec_.d,)


def test_fit_is_reproducible(blobs):
    X, y = blobs
    a = OTAFederatedClassifier(n_clients=4, rounds=5, snr_db=-5, random_state=3).fit(X, y)
    b = OTAFederatedClassifier(n_clients=4, rounds=5, snr_db=-5, random_state=3).fit(X, y)
    assert a.coef_flat_.tobytes() == b.coef_flat_.tobytes()


def test_pipeline_and_mlp(blobs):
    X, y = blobs
    pipe = make_pipeline(StandardScaler(),
                         OTAFederatedClassifier(n_clients=4, rounds=10, model="mlp", hidden=(8,),
                                                eta=0.1, snr_db=None))
    pipe.fit(X, y)
    assert pipe.score(X, y) >= 0.8


def test_fading_variant(blobs):
    X, y = blobs
    est = OTAFederatedClassifier(n_clients=6, rounds=4, fading_participation=0.5).fit(X, y)
    assert est.config_.participation == "fading"


def test_errors(blobs):
    X, y = blobs
    with pytest.raises(NotFittedError):
        OTAFederatedClassifier().predict(X)
    with pytest.raises(ValueError):
        OTAFederatedClassifier(n_clients=3).fit(X, np.zeros(len(X)))
    est = OTAFederatedClassifier(n_clients=3, rounds=2).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])
