import math
import warnings

import numpy as np
import pytest

from pobounds.propensity import (
    LogisticModel,
    fit_logistic,
    importance_weights,
    predict_propensity,
    uniform_weights,
    weights_from_propensity,
)


def _model(coef, intercept):
    coef = np.atleast_1d(np.asarray(coef, float))
    return LogisticModel(coef, float(intercept), 1.0, np.zeros(coef.size), np.ones(coef.size))


def test_balanced_coin_flips_give_half():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10000, 2))
    T = rng.integers(0, 2, 10000)
    m = fit_logistic(X, T, regularization_grid=(100.0,))
    assert abs(m.intercept) < 0.05
    assert np.all(np.abs(predict_propensity(m, X) - 0.5) < 0.05)


def test_separable_data_stays_finite_and_monotone():
    x = np.linspace(-2, 2, 200)
    T = (x > 0).astype(int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = fit_logistic(x[:, None], T, regularization_grid=(1.0,))
    assert np.all(np.isfinite(m.coefficients))
    p = predict_propensity(m, np.sort(x)[:, None])
    assert np.all(np.diff(p) >= 0)


def test_recovers_generating_coefficients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=50000)
    p = 1 / (1 + np.exp(-(0.8 * x - 0.3)))
    T = (rng.random(50000) < p).astype(int)
    m = fit_logistic(x[:, None], T, regularization_grid=(1e-6,))
    beta, b = m.original_scale()
    assert beta[0] == pytest.approx(0.8, abs=0.05)
    assert b == pytest.approx(-0.3, abs=0.05)


def test_predict_hand_values():
    assert predict_propensity(_model([0.0], 0.0), [[1.7]])[0] == pytest.approx(0.5)
    assert predict_propensity(_model([0.0], math.log(3)), [[-4.0]])[0] == pytest.approx(0.75)
    p = predict_propensity(_model([1.2], 0.1), np.linspace(-3, 3, 50)[:, None])
    assert np.all(np.diff(p) > 0)


def test_rct_weights():
    T = np.array([0, 1] * 50)
    ws = weights_from_propensity(np.full(100, 0.5), T)
    assert np.allclose(ws.raw, 1.0)
    assert np.allclose(ws.normalized, 1 / 50)


def test_hand_weight_and_cap():
    T = np.array([1, 0, 1, 0])
    e1 = np.array([0.05, 0.5, 0.5, 0.5])
    ws = weights_from_propensity(e1, T, clip_cap=100)
    assert ws.raw[0] == pytest.approx(10.0)
    capped = weights_from_propensity(e1, T, clip_cap=4)
    assert capped.raw[0] == 4.0 and capped.max_raw_weight[1] == pytest.approx(10.0)
    assert capped.n_clipped == 1


def test_normalized_weights_sum_to_one_per_arm():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 2))
    T = (rng.random(300) < 1 / (1 + np.exp(-X[:, 0]))).astype(int)
    ws = importance_weights(fit_logistic(X, T), X, T)
    for t in (0, 1):
        assert ws.arm(T, t).sum() == pytest.approx(1.0, abs=1e-12)


def test_uniform_weights():
    T = np.array([0, 0, 0, 1])
    ws = uniform_weights(T)
    assert np.allclose(ws.raw, 1.0)


def test_errors():
    with pytest.raises(ValueError):
        fit_logistic(np.zeros((5, 1)), np.ones(5, int))
    with pytest.raises(ValueError):
        weights_from_propensity([0.0, 0.5], [1, 0])
    with pytest.raises(ValueError):
        weights_from_propensity([0.5, 0.5], [1, 2])


def test_model_round_trip():
    m = _model([0.3, -1.0], 0.2)
    r = LogisticModel.from_dict(m.to_dict())
    assert np.array_equal(r.coefficients, m.coefficients) and r.intercept == m.intercept
