from __future__ import annotations

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from mplpref.errors import RankDeficient
from mplpref.mpl import standard_lists_by_id
from mplpref.prefmodel import POOLED_ESTIMATES, ParamVector
from mplpref.simulate import (
    SIM_PARAMS,
    FourParamBeta,
    SimConfig,
    draw_params,
    expected_a_counts,
    full_model,
    no_tremble_model,
    ols_clustered,
    run_spurious_experiment,
    simulate_choices,
    simulate_dataset,
)


@pytest.fixture(scope="module")
def draws12k():
    return draw_params(SimConfig(n_subjects=12_000, seed=0))


# -- four-parameter beta -----------------------------------------------------

def test_beta_validation():
    with pytest.raises(ValueError):
        FourParamBeta(1.0, 1.0)
    with pytest.raises(ValueError):
        FourParamBeta(0.0, 1.0, shape_a=0.0)


@given(st.floats(-5, 5), st.floats(0.01, 10), st.floats(0.1, 20), st.floats(0.1, 20))
def test_beta_mean_formula(lo, width, a, b):
    d = FourParamBeta(lo, lo + width, a, b)
    assert d.mean == pytest.approx(lo + width * a / (a + b))
    assert lo <= float(d.sample(np.random.default_rng(0))) <= lo + width


def test_default_distributions_are_mean_matched():
    m = SimConfig().means
    assert m.alpha == pytest.approx(0.456)
    assert m.lambda_ == pytest.approx(1.933)
    assert m.delta == pytest.approx(0.281)
    assert m.gamma == pytest.approx(0.010)
    assert m.kappa == pytest.approx(0.430)
    assert m.mu == pytest.approx(0.687)


def test_config_domain_checks():
    with pytest.raises(ValueError):
        SimConfig(dists=dict(SimConfig().dists, kappa=FourParamBeta(0.0, 1.2)))
    with pytest.raises(ValueError):
        SimConfig(dists=dict(SimConfig().dists, mu=FourParamBeta(-0.1, 1.0)))


def test_alpha_and_lambda_sample_means(draws12k):
    assert draws12k["alpha"].mean() == pytest.approx(0.456, abs=0.01)
    assert draws12k["lambda_"].mean() == pytest.approx(1.933, abs=0.02)


@pytest.mark.parametrize("param", SIM_PARAMS)
def test_marginals_ks(draws12k, param):
    d = SimConfig().dists[param]
    assert stats.kstest(draws12k[param], d.cdf).pvalue > 0.01
    assert abs(stats.skew(draws12k[param])) < 0.05


def test_draws_respect_domains(draws12k):
    assert draws12k["kappa"].between(0, 1).all()
    assert (draws12k["mu"] > 0).all() and (draws12k["lambda_"] > 0).all()


def test_draws_depend_only_on_seed_and_index():
    a = draw_params(SimConfig(n_subjects=50, seed=4))
    b = draw_params(SimConfig(n_subjects=80, seed=4))
    assert a.equals(b.iloc[:50])
    c = draw_params(SimConfig(n_subjects=50, seed=5))
    assert not a.equals(c)
    assert not a.equals(draw_params(SimConfig(n_subjects=50, seed=4), replication=1))


def test_fixed_preferences():
    d = draw_params(SimConfig(n_subjects=200, fixed_preferences=True))
    for p in ("alpha", "lambda_", "delta", "gamma"):
        assert d[p].nunique() == 1
    assert d["kappa"].nunique() == 200


# -- choices -----------------------------------------------------------------

def test_pure_tremble_choice_share():
    pv = ParamVector(**dict(POOLED_ESTIMATES.as_dict(), kappa=1.0))
    prof = [simulate_choices(pv, rng=np.random.default_rng(s)) for s in range(300)]
    share = np.mean([p["chose_b"].mean() for p in prof])
    n = 300 * 35
    assert abs(share - 0.5) < 3 * np.sqrt(0.25 / n)
    assert np.all(prof[0]["p_b"] == 0.5)


def test_noiseless_limit():
    pv = ParamVector(**dict(POOLED_ESTIMATES.as_dict(), kappa=0.0, mu=1e-7))
    prof = simulate_choices(pv, rng=np.random.default_rng(0))
    p = prof["p_b"].to_numpy()
    assert np.all((p < 1e-9) | (p > 1 - 1e-9))
    assert np.array_equal(prof["chose_b"].to_numpy(), p > 0.5)


def test_mpl2_expected_a_count():
    expected = expected_a_counts(POOLED_ESTIMATES, "MPL2")
    lists = {"MPL2": standard_lists_by_id()["MPL2"]}
    counts = [(~simulate_choices(POOLED_ESTIMATES, lists, np.random.default_rng(s))["chose_b"]).sum()
              for s in range(2000)]
    assert np.mean(counts) == pytest.approx(expected, abs=0.5)
    assert 0 < expected < 10


def test_simulated_dataset_layout():
    ds, draws = simulate_dataset(SimConfig(n_subjects=40, seed=3))
    assert ds.n_choices == 40 * 35
    assert ds.covariate_names == ("kappa_draw", "mu_draw")
    assert_allclose(ds.covariate("kappa_draw"), draws["kappa"])
    assert list(draws["respondent_id"]) == list(ds.respondent_ids)
    again, _ = simulate_dataset(SimConfig(n_subjects=40, seed=3))
    assert again.digest() == ds.digest()


def test_dataset_matches_single_subject_simulation():
    cfg = SimConfig(n_subjects=5, seed=8)
    ds, draws = simulate_dataset(cfg)
    from mplpref.simulate import choice_rng
    j = 3
    pv = ParamVector(**{p: draws.loc[j, p] for p in SIM_PARAMS})
    prof = simulate_choices(pv, cfg.price_lists(), choice_rng(cfg.seed, 0, j))
    assert np.array_equal(prof["chose_b"].to_numpy(), ds.chose_b[ds.choice_respondent == j])


# -- OLS ---------------------------------------------------------------------

def test_ols_exact_fit(rng):
    X = np.column_stack([np.ones(50), rng.normal(size=50)])
    fit = ols_clustered(X @ [1.5, -2.0], X)
    assert_allclose(fit.coef, [1.5, -2.0])
    assert_allclose(fit.residuals, 0, atol=1e-12)
    assert_allclose(fit.vcov, 0, atol=1e-20)


def test_ols_intercept_only(rng):
    y = rng.normal(size=30)
    assert ols_clustered(y, np.ones(30)).coef[0] == pytest.approx(y.mean())


def test_ols_rank_deficient():
    X = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(RankDeficient):
        ols_clustered(np.arange(10.0), X)


def test_ols_singleton_clusters_equal_robust(rng):
    n = 400
    X = np.column_stack([np.ones(n), rng.random(n), rng.random(n)])
    y = X @ [5.0, -2.0, 0.3] + rng.normal(size=n) * (1 + X[:, 1])
    clus = ols_clustered(y, X, cluster_ids=np.arange(n), small_sample=False)
    rob = ols_clustered(y, X, small_sample=False)
    assert np.max(np.abs(clus.vcov - rob.vcov)) < 1e-10
    adj = ols_clustered(y, X, cluster_ids=np.arange(n))
    assert_allclose(adj.vcov, rob.vcov * n / (n - 1) * (n - 1) / (n - 3), rtol=1e-12)


def test_ols_against_statsmodels(rng):
    n = 300
    g = rng.integers(0, 40, n)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [1.0, 0.5] + rng.normal(size=n) + rng.normal(size=40)[g]
    ours = ols_clustered(y, X, cluster_ids=g)
    ref = sm.OLS(y, X).fit(cov_type="cluster", cov_kwds={"groups": g})
    assert_allclose(ours.coef, ref.params, rtol=1e-10)
    assert_allclose(ours.vcov, ref.cov_params(), rtol=1e-8)
    hc1 = sm.OLS(y, X).fit(cov_type="HC1")
    assert_allclose(ols_clustered(y, X).vcov, hc1.cov_params(), rtol=1e-8)


# -- experiment --------------------------------------------------------------

def test_model_sizes():
    assert full_model().design.n_coefs == 18
    assert no_tremble_model().design.n_coefs == 15


def test_spurious_report_is_reproducible(tmp_path):
    cfg = SimConfig(n_subjects=150, n_replications=2, seed=9)
    a = run_spurious_experiment(cfg)
    b = run_spurious_experiment(cfg, threads=2)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.replications == [0, 1]
    assert set(a.results["pipeline"]) == {"full_structural", "no_tremble", "ols_counts"}
    kc = a.coefficients("no_tremble", "alpha")
    assert len(kc) == 2
    table = a.summary_table()
    assert {0, 1} <= set(table.columns)
    assert "[ols_counts]" in a.summary_text()
