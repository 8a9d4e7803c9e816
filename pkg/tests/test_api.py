import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedvar import SFVI, SFVIAvg
from fedvar.models import gen_conjugate, gen_heterogeneous_classification
from fedvar.rng import RngKey


def test_params_round_trip_and_clone():
    est = SFVIAvg(R=3, m=2, mode="full", lr=0.1)
    assert est.get_params()["mode"] == "full"
    c = clone(est).set_params(m=5)
    assert c.m == 5 and est.m == 2


def test_fit_conjugate():
    data = gen_conjugate(RngKey(0), 15, 3)
    est = SFVI(n_iter=200, lr=0.05).fit(data)
    assert set(est.local_params_) == {0, 1, 2}
    assert np.isfinite(est.elbo_)
    with pytest.raises(ValueError):
        est.predict(data)


def test_not_fitted_and_bad_input():
    with pytest.raises(NotFittedError):
        SFVI().predict_proba(gen_conjugate(RngKey(0), 4, 1))
    with pytest.raises(TypeError):
        SFVI().fit(np.zeros((3, 2)))


def test_classifier_predicts():
    kw = dict(J=2, N_j=30, d=2, K=2, skew=0.8)
    train = gen_heterogeneous_classification(RngKey(1), **kw)
    test = gen_heterogeneous_classification(RngKey(1), split="test", **kw)
    est = SFVIAvg(model="multinom", model_kwargs={"d": 2, "K": 2}, R=5, m=20, lr=0.05, n_samples=20).fit(train)
    p = est.predict_proba(test)
    assert p.shape == (60, 2) and np.allclose(p.sum(axis=1), 1)
    assert est.score(test) > 0.6
