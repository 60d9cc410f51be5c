import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from memshape import PRIORS_DIR, ShapedPPO
from memshape.exceptions import ConfigError


def test_params_roundtrip_and_clone():
    est = ShapedPPO(env="doorkey", total_steps=8192, ent_coef=0.02, extra={"size": 7})
    params = est.get_params()
    assert params["ent_coef"] == 0.02 and params["extra"] == {"size": 7}
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(seed=4)
    assert est.seed == 4


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        ShapedPPO().predict(np.eye(64)[:1])


def test_fit_predict_frozenlake():
    est = ShapedPPO(total_steps=4096, horizon=2048,
                    prior=str(PRIORS_DIR / "frozenlake_8x8.json")).fit()
    X = np.eye(64)[:5]
    proba = est.predict_proba(X)
    assert proba.shape == (5, 4) and np.allclose(proba.sum(axis=1), 1.0)
    np.testing.assert_array_equal(est.predict(X), proba.argmax(axis=1))
    assert len(est.history_) == 2 and est.n_features_in_ == 64
    assert 0.0 <= est.score(seeds=range(3)) <= 1.0
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 10)))
    with pytest.raises(ValueError):
        est.predict(np.array([[np.nan] * 64]))


def test_fit_is_deterministic():
    a = ShapedPPO(total_steps=2048, horizon=2048, seed=3).fit()
    b = ShapedPPO(total_steps=2048, horizon=2048, seed=3).fit()
    X = np.eye(64)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_invalid_hyperparameters_fail_at_fit():
    with pytest.raises(ConfigError):
        ShapedPPO(env="pong").fit()
    with pytest.raises(ConfigError):
        ShapedPPO(extra={"bogus": 1}).fit()
