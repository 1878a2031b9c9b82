import math

import numpy as np
import pytest

from zipg import rng
from zipg.model import ModelSpec
from zipg.simulation import (
    ExperimentError,
    ScenarioConfig,
    generate_counts,
    generate_covariates,
    run_experiment,
    sensitivity_bic_experiment,
    simulate_dataset,
    simulate_from_params,
    summarize,
    ReplicateRecord,
)


def test_covariates_structure():
    cfg = ScenarioConfig(n_subjects=10000, n_measurements=5)
    x, x_star, subject_of = generate_covariates(cfg, rng.stream(1, 0))
    x1 = x[:, 0].reshape(10000, 5)
    assert np.all(x1 == x1[:, :1])
    np.testing.assert_array_equal(x_star[:, 0], x1[:, 0])
    assert abs(x_star.mean() - 0.5) < 0.02
    within = x[:, 1].reshape(10000, 5).var(axis=1, ddof=1).mean()
    assert within == pytest.approx(0.1, abs=0.005)


def test_unequal_measurements():
    cfg = ScenarioConfig(n_subjects=3, n_measurements=[2, 5, 1])
    data = simulate_dataset(cfg, rng.stream(2, 0))
    assert data.n_obs == 8
    assert np.bincount(data.subject_of).tolist() == [2, 5, 1]
    with pytest.raises(ValueError):
        ScenarioConfig(n_subjects=3, n_measurements=[2, 5]).measurements()


def test_near_certain_zero_inflation_gives_all_zeros():
    cfg = ScenarioConfig(gamma=(40.0,))
    data = simulate_dataset(cfg, rng.stream(3, 0))
    assert not np.any(data.counts)


def poisson_limit_config(**kw):
    return ScenarioConfig(beta0=math.log(10.0), beta=(), beta_star0=math.log(1e-9),
                          beta_star=(), depth_model="constant", depth_constant=1.0, **kw)


def test_poisson_limit_dispersion_ratio():
    cfg = poisson_limit_config(generator="pg")
    n = 100000
    counts = generate_counts(cfg, np.zeros((n, 0)), np.zeros((n, 0)), np.ones(n),
                             rng.stream(4, 0))
    assert counts.var() / counts.mean() == pytest.approx(1.0, abs=0.02)


def test_pg_generator_moments():
    lam, theta = 5.0, 0.8
    cfg = ScenarioConfig(beta0=math.log(lam), beta=(), beta_star0=math.log(theta), beta_star=(),
                         generator="pg", depth_model="constant", depth_constant=1.0)
    n = 100000
    w = generate_counts(cfg, np.zeros((n, 0)), np.zeros((n, 0)), np.ones(n), rng.stream(5, 0))
    var = lam * (1 + lam * theta)
    assert abs(w.mean() - lam) < 4 * math.sqrt(var / n)
    # SE of the sample variance from the fourth central moment
    m4 = np.mean((w - w.mean()) ** 4)
    assert abs(w.var(ddof=1) - var) < 4 * math.sqrt((m4 - var ** 2) / n)


def test_beta_binomial_matches_first_two_moments():
    lam, theta = 20.0, 0.5
    cfg = ScenarioConfig(beta0=math.log(lam / 1000.0), beta=(), beta_star0=math.log(theta),
                         beta_star=(), generator="zi-beta-binomial", gamma=(-40.0,),
                         depth_model="constant", depth_constant=1000.0)
    n = 100000
    w = generate_counts(cfg, np.zeros((n, 0)), np.zeros((n, 0)), np.full(n, 1000.0),
                        rng.stream(6, 0))
    assert w.mean() == pytest.approx(lam, rel=0.02)
    assert w.var() == pytest.approx(lam * (1 + lam * theta), rel=0.05)


def test_null_scenario_zero_fraction():
    fracs = [simulate_dataset(ScenarioConfig(), rng.stream(7, i)).zero_fraction
             for i in range(50)]
    # the stand-in depth law gives slightly fewer structural-looking zeros
    assert 0.5 < np.mean(fracs) < 0.65


def mean_zero_fraction(**kw):
    return np.mean([simulate_dataset(ScenarioConfig(**kw), rng.stream(8, i)).zero_fraction
                    for i in range(100)])


def test_zero_fraction_trends():
    by_beta1 = [mean_zero_fraction(beta=(b, 0.45)) for b in (0.0, 0.5, 1.0)]
    assert by_beta1[0] > by_beta1[1] > by_beta1[2]
    by_beta_star1 = [mean_zero_fraction(beta_star=(b,)) for b in (0.0, 0.6, 1.2, 1.8)]
    assert all(a < b for a, b in zip(by_beta_star1, by_beta_star1[1:]))


def test_simulate_from_params_moments():
    data = simulate_dataset(ScenarioConfig(n_measurements=5), rng.stream(9, 0))
    spec = ModelSpec.for_data(data)
    omega = np.array([-6.0, 0.0, 0.0, math.log(0.5), 0.0, -40.0])
    draws = simulate_from_params(omega, data, spec, rng.stream(9, 1), copies=4000)
    lam = data.depths * math.exp(-6.0)
    np.testing.assert_allclose(draws.mean(axis=0), lam, rtol=0.15)
    assert draws.shape == (4000, data.n_obs)


def test_single_replicate_summary():
    cfg = ScenarioConfig(n_measurements=5, seed=3)
    s = run_experiment(cfg, L=1, B=0, tests=("LRT:beta1",))
    rec = s.replicates[0]
    np.testing.assert_array_equal(s.avg_bias, rec.estimate - cfg.true_params())
    assert s.bias_se is None and s.avg_se is None and s.coverage is None
    assert s.L == 1 and s.n_failed == 0
    assert s.rejection_rate["LRT:beta1"] in (0.0, 1.0)


def test_experiment_deterministic_across_workers():
    cfg = ScenarioConfig(n_measurements=5, seed=4)
    a = run_experiment(cfg, L=3, B=0, tests=("LRT:beta_star1",))
    b = run_experiment(cfg, L=3, B=0, tests=("LRT:beta_star1",), workers=3)
    np.testing.assert_array_equal(a.avg_bias, b.avg_bias)
    np.testing.assert_array_equal(a.rmse, b.rmse)
    assert a.rejection_rate == b.rejection_rate
    for ra, rb in zip(a.replicates, b.replicates):
        np.testing.assert_array_equal(ra.estimate, rb.estimate)
        assert ra.p_values == rb.p_values


def test_rmse_dominates_bias():
    g = np.random.default_rng(0)
    truth = np.zeros(3)
    recs = [ReplicateRecord(i, estimate=g.normal(0.3, 1.0, 3)) for i in range(50)]
    s = summarize(recs, truth, ["a", "b", "c"])
    assert np.all(s.rmse ** 2 >= s.avg_bias ** 2 - 1e-15)


def test_failures_abort():
    recs = [ReplicateRecord(i, failed=True, reason="x") for i in range(3)]
    with pytest.raises(ExperimentError):
        summarize(recs, np.zeros(1), ["a"])
    with pytest.raises(ValueError):
        run_experiment(ScenarioConfig(), L=0)
    with pytest.raises(ValueError):
        run_experiment(ScenarioConfig(), L=1, tests=("Score:beta1",))


def test_bic_experiment_reproducible():
    a = sensitivity_bic_experiment([0.0], L=1, seed=5, n_measurements=10)
    b = sensitivity_bic_experiment([0.0], L=1, seed=5, n_measurements=10)
    assert a.tolist() == b.tolist()
    assert a[0] in (0.0, 1.0)
    with pytest.raises(ValueError):
        sensitivity_bic_experiment([-1.0], L=1)
