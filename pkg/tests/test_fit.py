import math

import numpy as np
import pytest

from _oracles import direct_loglik, grid_mle
from _sim import TRUE3, draw_outcomes, simulate
from mpmkit.data import Dataset
from mpmkit.errors import ConvergenceError, PreconditionError, RankDeficientError, SeparationError
from mpmkit.fit import (
    GRAD_TOL,
    fit,
    fit_binary,
    log_likelihood,
    log_likelihood_gradient_hessian,
    newton_multinomial,
    transform_search,
)
from mpmkit.model import make_model


def _intercept_only(counts):
    y = np.repeat(np.arange(len(counts)), counts)
    return Dataset(np.empty((y.size, 0)), y, (), tuple("ABCDE"[: len(counts)]))


def test_intercept_only_closed_form():
    r = fit(_intercept_only([50, 100, 50]))
    assert r.model.coefficients[:, 0] == pytest.approx([math.log(2), 0.0], abs=1e-12)
    assert r.converged


def test_matches_grid_oracle():
    rng = np.random.default_rng(11)
    _, d = simulate([[0.5, 1.2], [-0.3, -0.8]], 20, rng)
    theta, ll = grid_mle(d.X, d.y, 3)
    r = fit(d)
    assert np.max(np.abs(r.model.coefficients - theta)) < 1e-3
    assert r.log_likelihood >= ll - 1e-9


def test_log_likelihood_matches_direct_form():
    rng = np.random.default_rng(4)
    m, d = simulate(TRUE3, 100, rng)
    assert log_likelihood(m, d) == pytest.approx(direct_loglik(m.coefficients, d.X, d.y, 3), rel=1e-13)


def test_gradient_and_hessian_finite_differences():
    rng = np.random.default_rng(5)
    for k, p in [(3, 2), (4, 1), (2, 3)]:
        coef = rng.normal(size=(k - 1, p + 1))
        m, d = simulate(coef, 60, rng)
        m = make_model(m.categories, m.predictors, coef + rng.normal(size=coef.shape) * 0.3)
        ll, g, H = log_likelihood_gradient_hessian(m, d)
        theta = m.coefficients.ravel()
        h = 1e-5
        fd_g = np.empty_like(theta)
        fd_H = np.empty((theta.size, theta.size))
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            f = lambda t: log_likelihood(make_model(m.categories, m.predictors, t.reshape(coef.shape)), d)
            fd_g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
            gp = log_likelihood_gradient_hessian(make_model(m.categories, m.predictors, (theta + e).reshape(coef.shape)), d)[1]
            gm = log_likelihood_gradient_hessian(make_model(m.categories, m.predictors, (theta - e).reshape(coef.shape)), d)[1]
            fd_H[:, i] = (gp - gm) / (2 * h)
        assert np.allclose(g, fd_g, rtol=1e-5, atol=1e-6 * np.abs(g).max())
        assert np.allclose(H, fd_H, rtol=1e-5, atol=1e-6 * np.abs(H).max())
        assert np.allclose(H, H.T)


def test_gradient_at_zero():
    y = np.array([0] * 7 + [1] * 5 + [2] * 9)
    d = Dataset(np.random.default_rng(0).normal(size=(21, 1)), y, ("x",), ("A", "B", "C"))
    _, g, _ = log_likelihood_gradient_hessian(make_model("ABC", ["x"], np.zeros((2, 2))), d)
    assert g[0] == pytest.approx(5 - 21 / 3)
    assert g[2] == pytest.approx(9 - 21 / 3)


def test_stationarity_and_information():
    rng = np.random.default_rng(6)
    _, d = simulate(TRUE3, 300, rng)
    r = fit(d)
    assert r.converged
    assert np.max(np.abs(r.gradient)) <= 1e-6
    _, g, H = log_likelihood_gradient_hessian(r.model, d)
    assert np.max(np.abs(g)) <= 1e-6
    info = r.observed_information
    assert np.allclose(info, info.T)
    assert np.all(np.linalg.eigvalsh(info) > 0)
    assert np.allclose(info, -H, rtol=1e-6, atol=1e-8)


def test_aic_identity():
    rng = np.random.default_rng(7)
    _, d = simulate(TRUE3, 200, rng)
    r = fit(d)
    assert r.aic == -2 * r.log_likelihood + 2 * 2 * 3


def test_loglik_trace_non_decreasing():
    # accepted steps never lower the likelihood by more than rounding noise
    rng = np.random.default_rng(8)
    _, d = simulate([[1.0, 3.0, -2.0], [-1.0, -2.0, 2.5]], 400, rng)
    trace = np.array(fit(d).loglik_trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) >= -1e-13 * np.abs(trace[1:]).clip(1))


def test_affine_rescaling_invariance():
    rng = np.random.default_rng(9)
    _, d = simulate(TRUE3, 300, rng)
    a, b = -3.7, 120.0
    X2 = d.X.copy()
    X2[:, 0] = a * X2[:, 0] + b
    r1 = fit(d)
    r2 = fit(Dataset(X2, d.y, d.predictors, d.categories))
    c1, c2 = r1.model.coefficients, r2.model.coefficients
    assert np.allclose(c2[:, 1], c1[:, 1] / a, rtol=1e-7)
    assert np.allclose(c2[:, 0], c1[:, 0] - b * c1[:, 1] / a, rtol=1e-7, atol=1e-8)
    assert np.allclose(r1.model.predict_proba(d.X), r2.model.predict_proba(X2), atol=1e-8)


def test_separation_detected():
    x = np.arange(30, dtype=float)
    y = np.array([0] * 10 + [1] * 10 + [2] * 10)
    with pytest.raises(SeparationError, match="separation detected"):
        fit(Dataset(x[:, None], y, ("x",), ("A", "B", "C")))


def test_rank_deficient():
    rng = np.random.default_rng(10)
    x = rng.normal(size=40)
    y = rng.integers(0, 3, 40)
    y[:3] = [0, 1, 2]
    with pytest.raises(RankDeficientError):
        fit(Dataset(np.column_stack([x, 2 * x + 1]), y, ("a", "b"), ("A", "B", "C")))


def test_preconditions():
    with pytest.raises(PreconditionError):
        fit(Dataset(np.zeros((4, 1)) + np.arange(4)[:, None], np.array([0, 1, 2, 0]), ("x",), ("A", "B", "C")))
    with pytest.raises(PreconditionError, match="no events"):
        fit(Dataset(np.arange(10.0)[:, None], np.array([0, 1] * 5), ("x",), ("A", "B", "C")))


def test_non_convergence_reports_gradient():
    rng = np.random.default_rng(12)
    _, d = simulate(TRUE3, 200, rng)
    with pytest.raises(ConvergenceError) as err:
        fit(d, max_iter=1)
    assert err.value.gradient_norm > GRAD_TOL
    assert "gradient" in str(err.value)


def test_fit_binary_matches_closed_form():
    y = np.array([1] * 30 + [0] * 70)
    r = fit_binary(np.ones((100, 1)), y)
    assert r.coefficients[0][0] == pytest.approx(math.log(30 / 70), abs=1e-12)
    with pytest.raises(PreconditionError):
        fit_binary(np.ones((5, 1)), np.ones(5, dtype=int))


def test_offset_fit():
    rng = np.random.default_rng(13)
    n = 500
    off = rng.normal(size=(n, 2))
    P = np.exp(np.column_stack([np.zeros(n), off + [0.4, -0.3]]))
    P /= P.sum(1, keepdims=True)


    y = draw_outcomes(P, rng)
    res = newton_multinomial([np.ones((n, 1))] * 2, y, 3, offset=off)
    # the intercepts maximize the offset likelihood: no small move improves it
    t = np.array([res.coefficients[0][0], res.coefficients[1][0]])

    def ll(a):
        lp = off + a
        num = np.column_stack([np.zeros(n), lp])
        return (num[np.arange(n), y] - np.log(np.exp(num).sum(1))).sum()

    for j in range(2):
        for s in (-1e-4, 1e-4):
            a = t.copy()
            a[j] += s
            assert ll(a) <= ll(t)


def test_transform_search_independent_predictor():
    rng = np.random.default_rng(14)
    n = 300
    x = rng.uniform(1, 10, n)
    y = rng.integers(0, 3, n)
    d = Dataset(x[:, None], y, ("age",), ("A", "B", "C"))
    r = transform_search(d, "age")
    assert r.selected == "age"
    assert len(r.candidates) == 4
    # each AIC equals a direct refit
    direct = fit(Dataset(np.column_stack([x, x ** 2]), y, ("age", "age^2"), ("A", "B", "C"))).aic
    assert r.aics()["age + age^2"] == pytest.approx(direct, rel=1e-12)


def test_transform_search_quadratic_signal():
    rng = np.random.default_rng(15)
    n = 500
    x = rng.uniform(-3, 3, n)
    lp = np.column_stack([-1 + 1.5 * x ** 2, 0.5 - 1.2 * x ** 2])
    P = np.exp(np.column_stack([np.zeros(n), lp]))
    P /= P.sum(1, keepdims=True)


    d = Dataset(x[:, None], draw_outcomes(P, rng), ("z",), ("A", "B", "C"))
    r = transform_search(d, "z")
    assert r.selected == "z + z^2"
    avail = [c.aic for c in r.candidates if c.available]
    assert r.aics()["z + z^2"] == min(avail)
    assert r.candidates[1].note.startswith("skipped")


def test_transform_search_zero_value_skips_log():
    rng = np.random.default_rng(16)
    x = rng.uniform(0, 5, 100)
    x[0] = 0.0
    d = Dataset(x[:, None], rng.integers(0, 3, 100), ("x",), ("A", "B", "C"))
    r = transform_search(d, "x")
    assert not r.candidates[1].available
    assert "skipped" in r.candidates[1].note
    assert r.to_dict()["candidates"][1]["aic"] is None
