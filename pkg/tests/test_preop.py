import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from periop_aki.errors import DegenerateOutcome, MissingColumn
from periop_aki.evaluation import auc_score
from periop_aki.features import FeatureMatrix
from periop_aki.preop import (PreopModel, SplineBasis, deviance, fit_preop, irls,
                              natural_spline_columns, penalized_objective, predict_preop)


def _matrix(X, y, names=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = names or [f"x{j}" for j in range(X.shape[1])]
    return FeatureMatrix([f"r{i}" for i in range(len(y))], names, X,
                         {"aki_7day": np.asarray(y, dtype=bool)})


def _random_problem(rng, n=None, m=None):
    n = n or int(rng.integers(10, 51))
    m = m or int(rng.integers(2, 6))
    Z = np.column_stack([np.ones(n), rng.normal(size=(n, m - 1))])
    y = (rng.random(n) < 0.4).astype(float)
    return Z, y


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(20):
        Z, y = _random_problem(rng)
        beta = rng.normal(size=Z.shape[1])
        lam = float(rng.uniform(0, 10))
        _, g = penalized_objective(beta, Z, y, lam)
        h = 1e-6
        fd = np.array([(penalized_objective(beta + h * e, Z, y, lam)[0]
                        - penalized_objective(beta - h * e, Z, y, lam)[0]) / (2 * h)
                       for e in np.eye(beta.size)])
        assert np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12) < 1e-5


def test_irls_reaches_stationary_point():
    rng = np.random.default_rng(1)
    Z, y = _random_problem(rng, 200, 4)
    beta, it = irls(Z, y, 1.0)
    _, g = penalized_objective(beta, Z, y, 1.0)
    assert np.linalg.norm(g) < 1e-5 and it < 100


def test_penalty_monotone_deviance():
    rng = np.random.default_rng(3)
    Z, y = _random_problem(rng, 300, 5)
    Z[:, 1] += 2 * y  # some signal
    devs = [deviance(irls(Z, y, lam)[0], Z, y) for lam in (0.0, 0.3, 1, 3, 10, 30, 100)]
    assert all(a <= b + 1e-9 for a, b in zip(devs, devs[1:]))


def test_spline_basis_natural_linear_tails():
    knots = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    x = np.linspace(5, 10, 7)
    B = natural_spline_columns(x, knots)
    # second differences vanish beyond the last knot
    assert np.allclose(np.diff(B, 2, axis=0), 0.0, atol=1e-9)
    assert B.shape == (7, 4)
    b = SplineBasis.fit("x", np.random.default_rng(0).normal(size=100), df=4)
    assert b.kind == "natural_cubic" and np.all(np.diff(b.knots) > 0) and b.df >= 1
    assert SplineBasis.fit("x", [0, 1, 0, 1, 1]).kind == "linear"
    assert SplineBasis.fit("x", [2, 2, 2]).kind == "constant"


def test_separable_feature():
    rng = np.random.default_rng(0)
    y = np.r_[np.zeros(100), np.ones(100)].astype(bool)
    x = np.where(y, rng.uniform(2, 3, 200), rng.uniform(-3, -2, 200))
    m = fit_preop(_matrix(x, y), "aki_7day", (1.0, 10.0), seed=1)
    p = predict_preop(m, _matrix(x, y))
    assert auc_score(p, y) >= 0.99


def test_constant_features_give_prevalence():
    y = np.r_[np.ones(30), np.zeros(70)].astype(bool)
    X = np.column_stack([np.full(100, 3.0), np.full(100, -1.0)])
    m = fit_preop(_matrix(X, y), "aki_7day", (1.0,))
    assert np.allclose(predict_preop(m, _matrix(X, y)), 0.3, atol=1e-6)


def test_single_lambda_selected():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(120, 2))
    y = (X[:, 0] + rng.normal(size=120)) > 0
    m = fit_preop(_matrix(X, y), "aki_7day", (7.0,))
    assert m.lam == 7.0 and len(m.cv_table) == 1
    assert len(m.cv_table[0]["fold_aucs"]) == 5


def test_lambda_selection_by_cv():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 3))
    y = (np.sin(2 * X[:, 0]) + 0.5 * X[:, 1] + rng.normal(0, 0.5, 300)) > 0
    m = fit_preop(_matrix(X, y), "aki_7day", (0.3, 1, 3, 10, 30, 100), seed=4)
    best = max(m.cv_table, key=lambda r: r["mean_auc"])
    assert m.lam == best["lambda"]
    assert m.oof_scores.shape == (300,)
    # out-of-fold scores are not the in-sample predictions
    assert not np.allclose(m.oof_scores, predict_preop(m, _matrix(X, y)))


def test_predict_zero_model_and_monotone():
    b = SplineBasis("x", "linear", center=[0.0], scale=[1.0])
    m = PreopModel(["x0"], [b], 0.0, [np.zeros(1)], 1.0)
    X = _matrix(np.linspace(-5, 5, 11), np.r_[np.zeros(5), np.ones(6)])
    assert np.all(predict_preop(m, X) == 0.5)
    m = PreopModel(["x0"], [b], 0.0, [np.array([3.0])], 1.0)
    p = predict_preop(m, X)
    assert np.all(np.diff(p) > 0) and np.all((p > 0) & (p < 1))


def test_missing_column():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 2))
    y = X[:, 0] > 0
    m = fit_preop(_matrix(X, y), "aki_7day", (1.0,))
    with pytest.raises(MissingColumn):
        predict_preop(m, _matrix(X[:, :1], y))


def test_degenerate_outcome():
    with pytest.raises(DegenerateOutcome):
        fit_preop(_matrix(np.arange(100.0), np.zeros(100)), "aki_7day", (1.0,))
    with pytest.raises(DegenerateOutcome):
        fit_preop(_matrix(np.arange(20.0), np.arange(20) % 2), "aki_7day", (1.0,))


@given(st.floats(0.01, 100), st.floats(-1000, 1000))
@settings(max_examples=25, deadline=None)
def test_affine_rescaling_invariance(a, c):
    rng = np.random.default_rng(8)
    X = rng.normal(size=(150, 2))
    y = (X[:, 0] ** 2 + X[:, 1] + rng.normal(size=150)) > 1
    m1 = fit_preop(_matrix(X, y), "aki_7day", (1.0,), seed=0)
    X2 = X.copy()
    X2[:, 0] = a * X[:, 0] + c
    m2 = fit_preop(_matrix(X2, y), "aki_7day", (1.0,), seed=0)
    p1 = predict_preop(m1, _matrix(X, y))
    p2 = predict_preop(m2, _matrix(X2, y))
    assert np.max(np.abs(p1 - p2)) < 1e-8


def test_json_round_trip():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 3))
    y = X[:, 0] + rng.normal(size=100) > 0
    m = fit_preop(_matrix(X, y), "aki_7day", (1.0, 10.0))
    m2 = PreopModel.from_json(m.to_json())
    assert np.array_equal(predict_preop(m, _matrix(X, y)), predict_preop(m2, _matrix(X, y)))
