import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.estimator_checks import parametrize_with_checks

from fedadapt.estimator import BlockChainRegressor
from fedadapt.model import forward


@parametrize_with_checks([BlockChainRegressor(n_epochs=2)])
def test_sklearn_compatible(estimator, check):
    check(estimator)


def data(n=1500, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, d))
    return X, 5 * np.sin(X @ np.array([1.0, 0.5, -0.3][:d]))


def test_fit_learns():
    X, y = data()
    model = BlockChainRegressor(lr=3e-3, n_epochs=5).fit(X, y)
    assert model.score(X, y) > 0.9


def test_predict_matches_forward():
    X, y = data(200)
    model = BlockChainRegressor().fit(X, y)
    expected = [forward(model.weights_, x).prediction for x in X[:20]]
    np.testing.assert_allclose(model.predict(X[:20]), expected, rtol=1e-12)
    assert model.predict_blocks(X[:5]).shape == (5, 5)


def test_partial_fit_mad_touches_one_block_per_row():
    X, y = data(10)
    model = BlockChainRegressor(mode="mad").partial_fit(X[:1], y[:1])
    assert model.histogram_.counts.sum() == 1.0
    model.partial_fit(X[1:], y[1:])
    assert model.histogram_.counts.sum() == 10.0 and model.n_updates_ == 10


def test_partial_fit_continues_from_fit():
    X, y = data(300)
    model = BlockChainRegressor().fit(X, y)
    before = model.weights_
    model.partial_fit(X[:5], y[:5])
    assert model.weights_ != before


def test_reproducible_and_clone():
    X, y = data(300)
    a = BlockChainRegressor(random_state=3).fit(X, y)
    b = clone(a).fit(X, y)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))


def test_validation():
    X, y = data(20)
    with pytest.raises(NotFittedError):
        BlockChainRegressor().predict(X)
    with pytest.raises(ValueError):
        BlockChainRegressor(lr=0).fit(X, y)
    with pytest.raises(ValueError):
        BlockChainRegressor(mode="none").fit(X, y)
    with pytest.raises(ValueError):
        BlockChainRegressor(mode="half").fit(X, y)
    model = BlockChainRegressor().fit(X, y)
    with pytest.raises(ValueError, match="features"):
        model.predict(X[:, :2])
    with pytest.raises(ValueError):
        model.partial_fit(X[:, :2], y)
