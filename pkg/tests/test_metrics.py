import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_force_c, brute_force_pdi
from _sim import TRUE3, draw_outcomes, simulate
from mpmkit.errors import PreconditionError
from mpmkit.fit import design_matrix, fit, fit_binary
from mpmkit.metrics import (
    bootstrap_ci,
    bootstrap_indices,
    calibration_report,
    curves_csv,
    discrimination_report,
    mann_whitney_c,
    mean_calibration,
    moderate_calibration_curve,
    pairwise_c,
    pdi,
    rcs_basis,
    weak_calibration,
    weak_calibration_binary_approx,
)
from mpmkit.model import lps_from_probabilities, make_model, probabilities_from_lps

# ---------------------------------------------------------------- mean


def test_oe_one_hot_identity():
    y = np.array([0, 1, 2, 1, 0])
    oe = [m.oe for m in mean_calibration(np.eye(3)[y], y)]
    assert oe == [1.0, 1.0, 1.0]


def test_oe_matched_marginals():
    y = np.array([0] * 5 + [1] * 3 + [2] * 2)
    probs = np.tile([0.5, 0.3, 0.2], (10, 1))
    assert [m.oe for m in mean_calibration(probs, y)] == pytest.approx([1, 1, 1], abs=1e-12)


def test_oe_hand_arithmetic():
    y = np.array([0] * 4 + [1] * 3 + [2] * 3)
    probs = np.tile([0.5, 0.3, 0.2], (10, 1))
    assert [m.oe for m in mean_calibration(probs, y)] == pytest.approx([0.8, 1.0, 1.5], abs=1e-12)


def test_oe_equals_prevalence_over_mean_risk():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet([1, 2, 3], size=300)
    y = draw_outcomes(probs, rng)
    for c, m in enumerate(mean_calibration(probs, y)):
        assert m.oe == pytest.approx(np.mean(y == c) / probs[:, c].mean(), rel=1e-12)
        se = math.sqrt((1 - m.prevalence) / m.observed)
        assert m.oe_ci[0] == pytest.approx(m.oe * math.exp(-1.959963984540054 * se), rel=1e-12)


def test_oe_zero_expected():
    with pytest.raises(PreconditionError):
        mean_calibration(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 1]))


# ---------------------------------------------------------------- weak


def test_weak_identity_on_training_data():
    rng = np.random.default_rng(1)
    _, d = simulate(TRUE3, 500, rng)
    m = fit(d).model
    w = weak_calibration(m.linear_predictors(d.X), d.y)
    assert np.max(np.abs(w.intercepts)) < 1e-6
    assert np.max(np.abs(w.slopes - np.eye(2))) < 1e-6
    assert np.max(np.abs(w.slope_fit_intercepts)) < 1e-6


def test_weak_halved_lps_give_slope_two():
    rng = np.random.default_rng(2)
    coef = np.array(TRUE3)
    _, d = simulate(2 * coef, 5000, rng)
    lps = make_model("ABC", ["x1", "x2"], coef).linear_predictors(d.X)
    w = weak_calibration(lps, d.y)
    assert w.c_slopes == pytest.approx([2, 2], abs=0.2)
    lo, hi = w.slope_ci()[0, 0]
    assert lo < w.c_slopes[0] < hi


def test_weak_zero_variance_lp():
    lps = np.column_stack([np.linspace(-1, 1, 30), np.zeros(30)])
    with pytest.raises(PreconditionError, match="variance"):
        weak_calibration(lps, np.arange(30) % 3)


def test_binary_identity_on_collapsed_fit():
    rng = np.random.default_rng(3)
    _, d = simulate(TRUE3, 600, rng)
    for c in range(3):
        y01 = (d.y == c).astype(int)
        res = fit_binary(design_matrix(d.X), y01)
        p = 1 / (1 + np.exp(-(design_matrix(d.X) @ res.coefficients[0])))
        probs = np.roll(np.column_stack([p, (1 - p) / 2, (1 - p) / 2]), c, axis=1)
        b = weak_calibration_binary_approx(probs, d.y, c)
        assert abs(b.intercept) < 1e-6 and abs(b.slope - 1) < 1e-6


def test_binary_shrunk_risks_slope_two():
    rng = np.random.default_rng(4)
    n = 20000
    s_true = rng.normal(-0.5, 1.5, n)
    y = (rng.random(n) < 1 / (1 + np.exp(-s_true))).astype(int)
    p = 1 / (1 + np.exp(-0.5 * s_true))
    b = weak_calibration_binary_approx(np.column_stack([1 - p, p]), y, 1)
    assert b.slope == pytest.approx(2.0, abs=0.15)


def test_binary_degenerate_outcome():
    p = np.linspace(0.1, 0.9, 20)
    with pytest.raises(PreconditionError):
        weak_calibration_binary_approx(np.column_stack([1 - p, p]), np.ones(20, dtype=int), 1)


# ---------------------------------------------------------------- moderate


def test_rcs_basis_linear_beyond_outer_knots():
    knots = [0.0, 1.0, 2.0, 3.0]
    x = np.array([4.0, 5.0, 6.0, 7.0])
    B = rcs_basis(x, knots)
    assert B.shape == (4, 3)
    assert np.allclose(np.diff(B, n=2, axis=0), 0, atol=1e-9)


def test_curve_refuses_small_n():
    with pytest.raises(PreconditionError, match="at least 50"):
        moderate_calibration_curve(np.zeros((49, 2)), np.arange(49) % 3)


def test_curve_constant_lps():
    y = np.arange(90) % 3
    lps = np.tile([0.5, -0.5], (90, 1))
    curves = moderate_calibration_curve(lps, y, ["A", "B", "C"])
    p = probabilities_from_lps([0.5, -0.5])
    for c, cv in enumerate(curves):
        assert cv.method == "constant"
        assert cv.predicted.tolist() == pytest.approx([p[c]])
        assert cv.observed.tolist() == pytest.approx([1 / 3])


def test_curve_overprediction_below_diagonal():
    rng = np.random.default_rng(5)
    m, d = simulate(TRUE3, 3000, rng)
    # the evaluated model puts +1 on the reference log-odds for everyone
    lps = m.linear_predictors(d.X) - 1.0
    curves = moderate_calibration_curve(lps, d.y, m.categories)
    ref = curves[0]
    mid = (ref.predicted > 0.2) & (ref.predicted < 0.8)
    assert np.all(ref.observed[mid] < ref.predicted[mid])
    assert np.all(np.diff(ref.predicted) >= 0)


def test_curves_csv():
    rng = np.random.default_rng(6)
    m, d = simulate(TRUE3, 200, rng)
    text = curves_csv(moderate_calibration_curve(m.linear_predictors(d.X), d.y, m.categories))
    lines = text.splitlines()
    assert lines[0] == "category,predicted,observed_smoothed"
    assert len(lines) == 1 + 3 * 200


# ---------------------------------------------------------------- PDI


def test_pdi_perfect():
    y = np.array([0, 0, 1, 1, 2, 2, 2])
    assert pdi(np.eye(3)[y], y) == 1.0
    assert pdi(np.eye(3)[y], y, method="fast") == 1.0


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_pdi_all_tied(k):
    y = np.arange(4 * k) % k
    probs = np.tile(np.full(k, 1 / k), (y.size, 1))
    assert pdi(probs, y, method="enumerate") == 1 / k
    assert pdi(probs, y, method="fast") == 1 / k


def test_pdi_six_subject_fixture():
    probs = np.array([[0.6, 0.3, 0.1], [0.3, 0.3, 0.4], [0.2, 0.5, 0.3],
                      [0.4, 0.4, 0.2], [0.1, 0.3, 0.6], [0.3, 0.5, 0.2]])
    y = np.array([0, 0, 1, 1, 2, 2])
    exact = brute_force_pdi(probs, y, 3)
    assert pdi(probs, y, method="enumerate") == pytest.approx(float(exact), abs=1e-15)
    assert pdi(probs, y, method="fast") == pytest.approx(float(exact), abs=1e-15)


def _pdi_instance(draw_counts, pool_rows, rng):
    k = len(draw_counts)
    y = np.repeat(np.arange(k), draw_counts)
    pool = rng.dirichlet(np.ones(k), size=pool_rows)
    probs = pool[rng.integers(0, pool_rows, y.size)]
    return probs, y


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 4).flatmap(lambda k: st.lists(st.integers(1, 8), min_size=k, max_size=k)),
       st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_pdi_fast_equals_enumeration(counts, pool_rows, seed):
    probs, y = _pdi_instance(counts, pool_rows, np.random.default_rng(seed))
    a = pdi(probs, y, method="fast")
    b = pdi(probs, y, method="enumerate")
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(float(brute_force_pdi(probs, y, len(counts))), abs=1e-12)


def test_pdi_permutation_invariant_and_bounds():
    rng = np.random.default_rng(7)
    m, d = simulate(TRUE3, 400, rng)
    probs = m.predict_proba(d.X)
    perm = rng.permutation(400)
    v = pdi(probs, d.y)
    assert v == pdi(probs[perm], d.y[perm])
    assert 1 / 3 < v < 1


def test_pdi_unobserved_category():
    with pytest.raises(PreconditionError):
        pdi(np.full((4, 3), 1 / 3), np.array([0, 1, 0, 1]))


# ---------------------------------------------------------------- pairwise c


def test_c_perfect_and_tied():
    assert mann_whitney_c([0.1, 0.2], [0.3, 0.4]) == 1.0
    assert mann_whitney_c([0.5] * 3, [0.5] * 4) == 0.5


def test_c_five_vs_five_with_ties():
    neg = [0.1, 0.4, 0.35, 0.8, 0.2]
    pos = [0.4, 0.9, 0.2, 0.7, 0.65]
    expected = brute_force_c(neg, pos)
    assert expected == (17 + 0.5 * 2) / 25
    assert mann_whitney_c(neg, pos) == expected


def _pair_fixture(rng, k):
    n = int(rng.integers(2 * k, 40))
    pool = rng.dirichlet(np.ones(k), size=int(rng.integers(2, 8)))
    probs = np.vstack([pool[rng.integers(0, len(pool), n // 2)], rng.dirichlet(np.ones(k), size=n - n // 2)])
    y = rng.integers(0, k, n)
    y[:k] = np.arange(k)
    return probs, y


def test_pairwise_c_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(100):
        k = int(rng.integers(2, 5))
        probs, y = _pair_fixture(rng, k)
        for a in range(k):
            for b in range(a + 1, k):
                score = probs[:, b] / (probs[:, a] + probs[:, b])
                expected = brute_force_c(score[y == a], score[y == b])
                assert pairwise_c(probs, y, (a, b)) == expected


def test_conditional_risk_equals_submodel_for_reference_pairs():
    rng = np.random.default_rng(9)
    for _ in range(100):
        k = int(rng.integers(2, 5))
        probs, y = _pair_fixture(rng, k)
        lps = lps_from_probabilities(probs)
        for b in range(1, k):
            assert pairwise_c(probs, y, (0, b), "conditional_risk", lps) == pairwise_c(probs, y, (0, b), "submodel", lps)


def test_pairwise_errors():
    probs = np.full((6, 3), 1 / 3)
    y = np.array([0, 1, 2, 0, 1, 2])
    with pytest.raises(PreconditionError, match="reference"):
        pairwise_c(probs, y, (1, 2), "submodel")
    with pytest.raises(PreconditionError, match="empty"):
        pairwise_c(probs, np.array([0, 1, 1, 0, 1, 1]), (0, 2))


# ---------------------------------------------------------------- bootstrap


def test_constant_metric_zero_width():
    y = np.array([0, 1, 2] * 10)
    probs = np.eye(3)[y]
    lo, hi = bootstrap_ci(lambda idx: mean_calibration(probs[idx], y[idx])[1].oe, y, 3, 50, seed=1)
    assert lo == hi == 1.0


def test_bootstrap_deterministic_and_thread_independent(monkeypatch):
    rng = np.random.default_rng(10)
    m, d = simulate(TRUE3, 150, rng)
    probs = m.predict_proba(d.X)
    stat = lambda idx: pdi(probs[idx], d.y[idx])
    monkeypatch.setenv("MPMKIT_THREADS", "1")
    a = bootstrap_ci(stat, d.y, 3, 40, seed=3)
    b = bootstrap_ci(stat, d.y, 3, 40, seed=3)
    monkeypatch.setenv("MPMKIT_THREADS", "4")
    c = bootstrap_ci(stat, d.y, 3, 40, seed=3)
    assert repr(a) == repr(b) == repr(c)


def test_bootstrap_width_scales_with_sqrt_n():
    rng = np.random.default_rng(11)
    m, _ = simulate(TRUE3, 1, rng)
    widths = []
    for n in (200, 800):
        _, d = simulate(TRUE3, n, rng)
        probs = m.predict_proba(d.X)
        lo, hi = bootstrap_ci(lambda idx: pdi(probs[idx], d.y[idx]), d.y, 3, 400, seed=0)
        widths.append(hi - lo)
    assert 1.6 <= widths[0] / widths[1] <= 2.4


def test_bootstrap_redraw_limit():
    class AlwaysFirst:
        def integers(self, lo, hi, size):
            return np.zeros(size, dtype=int)

    with pytest.raises(PreconditionError, match="100 attempts"):
        bootstrap_indices(AlwaysFirst(), np.array([0, 1, 1]), 2)


# ---------------------------------------------------------------- reports


def test_reports_carry_both_methods():
    rng = np.random.default_rng(12)
    m, d = simulate(TRUE3, 300, rng)
    lps, probs = m.linear_predictors(d.X), m.predict_proba(d.X)
    cal = calibration_report(probs, lps, d.y, m.categories).to_dict()
    assert cal["weak_calibration"]["method"] == "multinomial"
    assert len(cal["binary_calibration"]) == 3
    assert len(cal["moderate_calibration"]) == 3
    disc = discrimination_report(probs, lps, d.y, m.categories, B=20, seed=0).to_dict()
    assert disc["pdi_lower_limit"] == 1 / 3
    pairs = {tuple(r["pair"]): r for r in disc["pairwise_c"]}
    assert pairs[("A", "B")]["submodel"] == pairs[("A", "B")]["conditional_risk"]
    assert pairs[("B", "C")]["submodel"] is None
    assert all(0 <= r["conditional_risk"] <= 1 for r in pairs.values())
    lo, hi = disc["pdi_ci"]
    assert lo <= disc["pdi"] <= hi


def test_perfect_separation_report():
    y = np.array([0, 1, 2] * 5)
    probs = np.clip(np.eye(3)[y], 1e-6, None)
    probs /= probs.sum(1, keepdims=True)
    disc = discrimination_report(probs, lps_from_probabilities(probs), y, ("A", "B", "C")).to_dict()
    assert disc["pdi"] == 1.0
    assert all(r["conditional_risk"] == 1.0 for r in disc["pairwise_c"])


def test_weak_collinear_lps_refused():
    rng = np.random.default_rng(13)
    x = rng.normal(size=200)
    lps = np.column_stack([0.5 + x, -1 + 2 * x])
    with pytest.raises(PreconditionError, match="not identifiable"):
        weak_calibration(lps, rng.integers(0, 3, 200))
