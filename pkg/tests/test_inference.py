import math
import types

import numpy as np
import pytest
from scipy import stats
from statsmodels.stats.multitest import multipletests

from zipg import rng
from zipg.em import fit
from zipg.inference import (
    InferenceError,
    LinearHypothesis,
    bh_fdr,
    bootstrap_wald,
    confidence_interval,
    hessian_wald,
    ks_goodness_of_fit,
    likelihood_ratio_test,
    parametric_bootstrap_wald,
    wald_statistic,
)
from zipg.model import LongitudinalDataset, ModelSpec
from zipg.simulation import ScenarioConfig, simulate_dataset, simulate_from_params

SPEC = ModelSpec(2, 1)


@pytest.fixture(scope="module")
def case():
    data = simulate_dataset(ScenarioConfig(n_measurements=10), rng.stream(404, 0))
    spec = ModelSpec.for_data(data)
    return data, spec, fit(data, spec)


def stub_fit(params):
    return types.SimpleNamespace(params=np.asarray(params, dtype=float), spec=SPEC)


def test_hypothesis_validation():
    with pytest.raises(ValueError):
        LinearHypothesis(np.ones((2, 6)), [0, 0])
    with pytest.raises(ValueError):
        LinearHypothesis(np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        LinearHypothesis(np.eye(6)[:1], [0, 0])
    h = LinearHypothesis.coefficient(SPEC, "beta_star1")
    assert h.a_matrix[0, 4] == 1.0 and h.rank == 1
    assert LinearHypothesis.empty(SPEC).rank == 0


def test_wald_invariant_to_row_reparameterization():
    g = np.random.default_rng(0)
    for _ in range(20):
        q = g.normal(size=(6, 6))
        cov = q @ q.T + 0.1 * np.eye(6)
        omega = g.normal(size=6)
        a = g.normal(size=(2, 6))
        b = g.normal(size=2)
        r = g.normal(size=(2, 2)) + 2 * np.eye(2)
        t1 = wald_statistic(omega, cov, LinearHypothesis(a, b))
        t2 = wald_statistic(omega, cov, LinearHypothesis(r @ a, r @ b))
        assert t2 == pytest.approx(t1, rel=1e-8)


def test_wald_single_coefficient_is_squared_z():
    g = np.random.default_rng(1)
    draws = g.normal([0, 0.3, 0, 0, 1, 0], 0.2, size=(200, 6))
    cov = np.cov(draws, rowvar=False)
    omega = np.array([-4, 0.3, 0.4, 0.6, 1.1, 0.0])
    t = wald_statistic(omega, cov, LinearHypothesis.coefficient(SPEC, 4))
    assert t == pytest.approx((1.1 / np.std(draws[:, 4], ddof=1)) ** 2, rel=1e-10)


def test_wald_singular_covariance():
    with pytest.raises(InferenceError, match="increase"):
        wald_statistic(np.ones(6), np.zeros((6, 6)), LinearHypothesis.coefficient(SPEC, 1))


def test_ci_excludes_zero_iff_p_below_alpha():
    g = np.random.default_rng(2)
    mismatches = 0
    for _ in range(2000):
        est = g.normal(0, 1, 6)
        draws = g.normal(0, g.uniform(0.3, 1.5), size=(60, 6)) + est
        hyp = LinearHypothesis.coefficient(SPEC, 1)
        cov = np.cov(draws, rowvar=False)
        p = stats.chi2.sf(wald_statistic(est, cov, hyp), 1)
        ci = confidence_interval(stub_fit(est), draws, 1, 0.95, "normal")
        mismatches += (ci.lower > 0 or ci.upper < 0) != (p < 0.05)
    assert mismatches == 0


def test_normal_and_quantile_agree_for_normal_draws():
    g = np.random.default_rng(3)
    draws = g.normal(0.5, 0.2, size=(20000, 6))
    fitted = stub_fit(np.full(6, 0.5))
    a = confidence_interval(fitted, draws, 2, method="normal")
    b = confidence_interval(fitted, draws, 2, method="quantile")
    assert a.lower == pytest.approx(b.lower, abs=0.01)
    assert a.upper == pytest.approx(b.upper, abs=0.01)
    assert a.lower <= 0.5 <= a.upper


def test_quantile_uses_linear_interpolation():
    draws = np.arange(1.0, 101.0).reshape(-1, 1)
    ci = confidence_interval(stub_fit([50.0]), draws, 0, 0.9, "quantile")
    # type-7 quantiles of 1..100 at 0.05 and 0.95
    assert ci.lower == pytest.approx(1 + 0.05 * 99)
    assert ci.upper == pytest.approx(1 + 0.95 * 99)


def test_identical_draws_give_zero_width():
    draws = np.full((100, 6), 0.7)
    for method in ("normal", "quantile"):
        ci = confidence_interval(stub_fit(np.full(6, 0.7)), draws, 3, method=method)
        assert ci.lower == ci.upper
    with pytest.warns(UserWarning, match="quantile"):
        ci = confidence_interval(stub_fit(np.full(6, 0.7)), draws, 3, method="bca",
                                 jackknife=np.full(50, 0.7))
    assert ci.lower == ci.upper == 0.7


def test_bca_matches_reference_formula():
    g = np.random.default_rng(4)
    x = g.gamma(4.0, 0.25, size=2000)
    jk = g.normal(1.0, 0.05, size=100) ** 3
    ci = confidence_interval(stub_fit([1.0]), x.reshape(-1, 1), 0, 0.9, "bca", jackknife=jk)
    z0 = stats.norm.ppf(np.mean(x < 1.0))
    d = jk.mean() - jk
    acc = np.sum(d ** 3) / (6 * np.sum(d ** 2) ** 1.5)
    zs = stats.norm.ppf([0.05, 0.95])
    probs = stats.norm.cdf(z0 + (z0 + zs) / (1 - acc * (z0 + zs)))
    np.testing.assert_allclose([ci.lower, ci.upper], np.quantile(x, probs))


def test_bh_examples():
    rej, _ = bh_fdr([0.01, 0.02, 0.9], 0.05)
    assert rej.tolist() == [True, True, False]
    rej, q = bh_fdr(np.ones(5), 0.05)
    assert not rej.any() and np.all(q == 1)
    assert bh_fdr([0.04], 0.05)[0].tolist() == [True]
    with pytest.raises(ValueError):
        bh_fdr([0.1, 1.2])


def test_bh_matches_reference_and_is_monotone():
    g = np.random.default_rng(5)
    for _ in range(1000):
        m = g.integers(1, 40)
        p = np.where(g.random(m) < 0.3, g.random(m) * 0.01, g.random(m))
        rej, q = bh_fdr(p, 0.05)
        ref_rej, ref_q, _, _ = multipletests(p, 0.05, method="fdr_bh")
        np.testing.assert_allclose(q, ref_q, rtol=1e-12)
        assert np.array_equal(rej, ref_rej)
        if rej.any() and (~rej).any():
            assert p[rej].max() <= p[~rej].min()


def test_bootstrap_wald_centered_hypothesis(case):
    data, spec, base = case
    b = base.params[1]
    rep = bootstrap_wald(data, spec, LinearHypothesis.coefficient(spec, 1, b), B=50, seed=1,
                         base=base)
    assert rep.statistic == pytest.approx(0.0, abs=1e-20)
    assert rep.p_value == pytest.approx(1.0)
    cov = rep.covariance
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() > -1e-12
    assert rep.n_bootstrap == 50 and not rep.unreliable


def test_bootstrap_wald_deterministic_across_workers(case):
    data, spec, base = case
    hyp = LinearHypothesis.coefficient(spec, "beta_star1")
    a = bootstrap_wald(data, spec, hyp, B=50, seed=9, base=base)
    b = bootstrap_wald(data, spec, hyp, B=50, seed=9, base=base, workers=3)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.statistic == b.statistic
    c = bootstrap_wald(data, spec, hyp, B=50, seed=10, base=base)
    assert c.statistic != a.statistic


def test_bootstrap_wald_subject_resampling(case):
    data, spec, base = case
    rep = bootstrap_wald(data, spec, LinearHypothesis.coefficient(spec, 1), B=50, seed=2,
                         resample_unit="subject", base=base)
    assert np.isfinite(rep.statistic)
    with pytest.raises(ValueError):
        bootstrap_wald(data, spec, LinearHypothesis.coefficient(spec, 1), B=49)


def test_parametric_bootstrap_wald_deterministic(case):
    data, spec, base = case
    hyp = LinearHypothesis.coefficient(spec, "beta_star1")
    a = parametric_bootstrap_wald(data, spec, hyp, B=50, seed=3, base=base)
    b = parametric_bootstrap_wald(data, spec, hyp, B=50, seed=3, base=base)
    assert a.method == "pbWald"
    assert a.statistic == b.statistic
    np.testing.assert_array_equal(a.covariance, b.covariance)


def test_lrt_empty_and_rescaling(case):
    data, spec, base = case
    assert likelihood_ratio_test(data, spec, LinearHypothesis.empty(spec)).statistic == 0.0
    hyp = LinearHypothesis.coefficient(spec, "beta2")
    t1 = likelihood_ratio_test(data, spec, hyp, base=base)
    x = data.mean_covariates.copy()
    x[:, 1] *= 10.0
    scaled = LongitudinalDataset(counts=data.counts, depths=data.depths, mean_covariates=x,
                                 disp_covariates=data.disp_covariates,
                                 subject_of=data.subject_of)
    t2 = likelihood_ratio_test(scaled, spec, hyp)
    assert t2.statistic == pytest.approx(t1.statistic, rel=1e-5)
    assert t1.df == 1 and t1.statistic > 0


def test_hessian_wald_needs_diagnostics_flag(case):
    data, spec, base = case
    hyp = LinearHypothesis.coefficient(spec, 1)
    with pytest.raises(InferenceError):
        hessian_wald(data, spec, hyp, base=base)
    rep = hessian_wald(data, spec, hyp, base=base, diagnostics=True)
    assert rep.method == "Wald" and np.all(np.linalg.eigvalsh(rep.covariance) > 0)


def test_ks_self_consistent_and_gross_misfit(case):
    data, spec, base = case
    counts = simulate_from_params(base.params, data, spec, rng.stream(8, 0))[0]
    sim = data.with_counts(counts)
    refit = fit(sim, spec)
    assert ks_goodness_of_fit(sim, refit, seed=1)[1] > 0.05
    shifted = data.with_counts(data.counts + 50)
    assert ks_goodness_of_fit(shifted, base, seed=1)[1] < 0.01
    same = stats.ks_2samp(data.counts, data.counts, method="asymp")
    assert same.statistic == 0.0
