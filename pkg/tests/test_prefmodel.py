from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mplpref.errors import UnsupportedCurvature
from mplpref.mpl import ONE_WEEK, MPL1_1, Option, Outcome, standard_lists_by_id
from mplpref.prefmodel import (
    BENCHMARK_LOTTERY,
    POOLED_ESTIMATES,
    DiscountForm,
    ParamVector,
    UtilityFamily,
    certainty_equivalent,
    discount_terms,
    discount_weight,
    option_value,
    risk_premium,
    utility,
    utility_terms,
    value_terms,
)

FAMILIES = list(UtilityFamily)

# 50-digit mpmath evaluations, frozen
U100_ALPHA046 = 22.264156196618757
CE_ALPHA046 = 27.703653396375480
CE_ALPHA0683 = 11.229969133640576


def pv(**kw):
    base = dict(alpha=0.3, lambda_=2.0, phi=0.02, alpha_plus=0.3, alpha_minus=0.5)
    base.update(kw)
    return ParamVector(**base)


@pytest.mark.parametrize("family", FAMILIES)
def test_utility_zero_at_reference(family):
    assert abs(utility(0.0, pv(), family)) < 1e-12


def test_utility_values():
    assert utility(100, ParamVector(alpha=0.46)) == pytest.approx(U100_ALPHA046, rel=1e-14)
    assert utility(-10, ParamVector(alpha=0.0, lambda_=2.0)) == pytest.approx(-20.0)


def test_unsupported_curvature():
    with pytest.raises(UnsupportedCurvature):
        utility(5.0, ParamVector(alpha=1.0))
    with pytest.raises(UnsupportedCurvature):
        utility(5.0, pv(phi=0.0), UtilityFamily.CARA)


def test_dual_curvature_ignores_lambda():
    p = pv(lambda_=5.0)
    assert utility(-10, p, UtilityFamily.DUAL_CURVATURE) == pytest.approx(-(10 ** 0.5) / 0.5)


@given(
    st.sampled_from(FAMILIES),
    st.floats(-500, 500), st.floats(0.01, 100),
    st.floats(-3, 0.99), st.floats(0.5, 5),
)
def test_utility_strictly_increasing(family, x, dx, alpha, lam):
    p = pv(alpha=alpha, lambda_=lam, alpha_plus=alpha, alpha_minus=alpha, phi=0.01)
    assert utility(x, p, family) < utility(x + dx, p, family)


@given(st.floats(1, 1000), st.floats(-1, 0.9), st.booleans())
def test_eps_form_first_order_gap(mag, alpha, neg):
    # u_eps - u_crra = -eps^(1-a)/(1-a) + eps*|x|^(-a) + O(eps^2) on the gain side
    eps, lam = 0.001, 1.7
    x = -mag if neg else mag
    p = ParamVector(alpha=alpha, lambda_=lam)
    s = 1 - alpha
    gap = utility(x, p, UtilityFamily.CRRA_EPS) - utility(x, p, UtilityFamily.CRRA)
    first = -eps ** s / s + eps * mag ** (-alpha)
    expected = -lam * first if neg else first
    assert abs(gap - expected) < 1e-6 * max(1.0, lam * mag ** (-alpha))


@given(st.floats(0.01, 1000), st.floats(0.1, 5), st.sampled_from([UtilityFamily.CRRA, UtilityFamily.CARA]))
def test_loss_aversion_multiplicative(x, lam, family):
    p1, pl = pv(lambda_=1.0), pv(lambda_=lam)
    assert_allclose(utility(-x, pl, family), lam * utility(-x, p1, family), rtol=1e-12)


def test_option_value_examples():
    p = ParamVector(alpha=0.0, delta=0.28, gamma=0.01)
    assert option_value(Option.sure(100), p) == pytest.approx(100.0)
    p0 = ParamVector(alpha=0.0, delta=0.28, gamma=0.0)
    assert option_value(Option.sure(100, 1.0), p0) == pytest.approx(78.125)
    assert option_value(Option.coin(100, 0), ParamVector(alpha=0.0)) == pytest.approx(50.0)


def test_front_end_delay_is_present():
    p = ParamVector(alpha=0.0, delta=0.0, gamma=0.5)
    assert option_value(Option.sure(100, ONE_WEEK), p) == pytest.approx(100.0)
    assert option_value(Option.sure(100, 0.5), p) == pytest.approx(100 / 1.5)


def test_two_rates_split():
    p = ParamVector(alpha=0.0, delta=0.1, delta2=0.5)
    w = discount_weight(1.0, p, DiscountForm.TWO_RATES)
    assert w == pytest.approx(1.1 ** -0.5 * 1.5 ** -0.5)
    assert discount_weight(0.25, p, DiscountForm.TWO_RATES) == pytest.approx(1.1 ** -0.25)


@given(st.floats(0, 2), st.floats(-0.5, 2), st.floats(0, 2))
def test_qh_with_zero_gamma_is_exponential(t, delta, fd):
    p = ParamVector(delta=delta, gamma=0.0)
    assert discount_weight(t, p, DiscountForm.QUASI_HYPERBOLIC, fd) == \
        discount_weight(t, p, DiscountForm.EXPONENTIAL, fd)


@given(st.floats(-0.5, 1.0), st.floats(0.0, 2.0))
def test_far_list_gap_scales_with_present_bias(gamma, delta):
    lists = standard_lists_by_id()
    p0 = ParamVector(alpha=0.3, delta=delta, gamma=0.0)
    pg = p0.with_(gamma=gamma)
    for r in lists[MPL1_1].rows:
        d0 = option_value(r.option_b, p0) - option_value(r.option_a, p0)
        dg = option_value(r.option_b, pg) - option_value(r.option_a, pg)
        assert_allclose(dg, d0 / (1 + gamma), rtol=1e-12, atol=1e-12)


def test_beta_identity():
    assert ParamVector(gamma=0.25).beta == pytest.approx(0.8)


def test_certainty_equivalent_examples():
    assert certainty_equivalent(BENCHMARK_LOTTERY, 0.0) == pytest.approx(50.0)
    assert risk_premium(BENCHMARK_LOTTERY, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert certainty_equivalent(BENCHMARK_LOTTERY, 0.46) == pytest.approx(CE_ALPHA046, rel=1e-13)
    assert round(risk_premium(BENCHMARK_LOTTERY, 0.46), 2) == 22.30
    assert certainty_equivalent(BENCHMARK_LOTTERY, 0.683) == pytest.approx(CE_ALPHA0683, rel=1e-13)


@given(st.floats(-3, 0.95))
def test_certainty_equivalent_closed_form(alpha):
    ce = certainty_equivalent(BENCHMARK_LOTTERY, alpha)
    assert_allclose(ce, 100 * 0.5 ** (1 / (1 - alpha)), rtol=1e-12)


def test_certainty_equivalent_rejects():
    with pytest.raises(UnsupportedCurvature):
        certainty_equivalent(BENCHMARK_LOTTERY, 1.0)
    with pytest.raises(UnsupportedCurvature):
        certainty_equivalent(BENCHMARK_LOTTERY, 1.5)
    with pytest.raises(ValueError):
        certainty_equivalent(Option.coin(-10, 10), 0.3)
    with pytest.raises(ValueError):
        certainty_equivalent(Option.sure(10, 1.0), 0.3)


# -- vectorized kernels ------------------------------------------------------

PARAMS = {
    UtilityFamily.CRRA: dict(alpha=0.4, lambda_=1.8),
    UtilityFamily.CRRA_EPS: dict(alpha=0.4, lambda_=1.8),
    UtilityFamily.CARA: dict(phi=0.03, lambda_=1.8),
    UtilityFamily.DUAL_CURVATURE: dict(alpha_plus=0.4, alpha_minus=0.2),
}
X = np.array([[-150.0, 0.0], [55.0, -20.0], [1e-3, 1500.0], [5.0, 40.0]])


@pytest.mark.parametrize("family", FAMILIES)
def test_utility_terms_match_scalar(family):
    params = {k: np.full(len(X), v) for k, v in PARAMS[family].items()}
    u, _ = utility_terms(X, params, family)
    p = pv(**PARAMS[family])
    expected = np.array([[utility(x, p, family) for x in row] for row in X])
    assert_allclose(u, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_utility_terms_derivatives(family):
    params = {k: np.full(len(X), v) for k, v in PARAMS[family].items()}
    _, grads = utility_terms(X, params, family)
    for name in params:
        h = 1e-6
        up = dict(params, **{name: params[name] + h})
        dn = dict(params, **{name: params[name] - h})
        fd = (utility_terms(X, up, family)[0] - utility_terms(X, dn, family)[0]) / (2 * h)
        assert_allclose(grads[name], fd, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("disc", list(DiscountForm))
def test_discount_terms_derivatives(disc):
    t = np.array([[0.0, 0.5], [ONE_WEEK, 1.0], [0.5 + ONE_WEEK, 0.25]])
    params = {"delta": np.full(3, 0.3), "gamma": np.full(3, 0.05), "delta2": np.full(3, 0.1)}
    w, grads = discount_terms(t, params, disc)
    p = ParamVector(delta=0.3, gamma=0.05, delta2=0.1)
    assert_allclose(w, [[discount_weight(x, p, disc) for x in row] for row in t], rtol=1e-13)
    for name, g in grads.items():
        h = 1e-7
        up = dict(params, **{name: params[name] + h})
        dn = dict(params, **{name: params[name] - h})
        fd = (discount_terms(t, up, disc)[0] - discount_terms(t, dn, disc)[0]) / (2 * h)
        assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_value_terms_match_option_value():
    lists = standard_lists_by_id()
    p = POOLED_ESTIMATES
    for pl in lists.values():
        for r in pl.rows:
            for opt in (r.option_a, r.option_b):
                k = len(opt.outcomes)
                amt = np.array([[o.amount for o in opt.outcomes]])
                pr = np.array([[o.probability for o in opt.outcomes]])
                tm = np.array([[o.time for o in opt.outcomes]])
                params = {n: np.array([v]) for n, v in p.as_dict().items()}
                v, _ = value_terms(amt, pr, tm, params, UtilityFamily.CRRA, DiscountForm.QUASI_HYPERBOLIC)
                assert v[0] == pytest.approx(option_value(opt, p), rel=1e-12), k


def test_outcome_defaults():
    o = Outcome(5.0)
    assert o.probability == 1.0 and o.time == 0.0
