import math

import numpy as np
import pytest

from zipg.em import FitSettings, Restriction, run_em
from zipg.likelihood import (
    NonFiniteLikelihood,
    complete_loglik,
    e_step,
    grad_complete_loglik,
    information_criteria,
    observed_loglik,
)
from zipg.model import LongitudinalDataset, ModelSpec, design_matrices, log_pg_pmf
from zipg.optimizer import maximize

from conftest import small_dataset

SPEC0 = ModelSpec(0, 0)


def single(w):
    # depth 1 and zero parameters give lambda = theta = 1
    return LongitudinalDataset(counts=[w], depths=[1.0], mean_covariates=np.zeros((1, 0)),
                               disp_covariates=np.zeros((1, 0)), subject_of=[0])


def test_observed_single_observation():
    assert observed_loglik(np.zeros(3), single(0), SPEC0).loglik == pytest.approx(math.log(0.75))
    assert observed_loglik(np.zeros(3), single(1), SPEC0).loglik == pytest.approx(
        math.log(0.25) - math.log(2))


def test_observed_without_zero_inflation_is_pg(toy):
    spec = ModelSpec.for_data(toy)
    omega = np.array([-3.0, 0.2, 0.1, 0.3, -0.5, -60.0])
    lam = toy.depths * np.exp(-3.0 + toy.mean_covariates @ [0.2, 0.1])
    theta = np.exp(0.3 - 0.5 * toy.disp_covariates[toy.subject_of, 0])
    pg = np.sum(log_pg_pmf(toy.counts, lam, theta))
    assert observed_loglik(omega, toy, spec).loglik == pytest.approx(pg, abs=1e-9)


def test_observed_per_observation_sums(toy):
    spec = ModelSpec.for_data(toy)
    val = observed_loglik(np.array([-3.0, 0.2, 0.1, 0.3, -0.5, 0.1]), toy, spec,
                          per_observation=True)
    assert val.loglik == pytest.approx(np.sum(val.per_observation))


def test_observed_non_finite_reports_index():
    # the mean predictor overflows on the first row only
    data = LongitudinalDataset(counts=[3, 0], depths=[1.0, 1.0],
                               mean_covariates=np.array([[10.0], [0.0]]),
                               disp_covariates=np.zeros((1, 0)), subject_of=[0, 0])
    with pytest.raises(NonFiniteLikelihood) as err:
        observed_loglik(np.array([0.0, 1e308, 0.0, 0.0]), data, ModelSpec(1, 0))
    assert err.value.index == 0


def test_complete_examples():
    assert complete_loglik(np.zeros(3), single(0), [1.0], SPEC0) == pytest.approx(math.log(0.5))
    assert complete_loglik(np.zeros(3), single(1), [0.0], SPEC0) == pytest.approx(
        math.log(0.5 * 0.25))
    half = complete_loglik(np.zeros(3), single(0), [0.5], SPEC0)
    ends = [complete_loglik(np.zeros(3), single(0), [z], SPEC0) for z in (0.0, 1.0)]
    assert half == pytest.approx(np.mean(ends))


def test_complete_decomposition_identity():
    # nonzero counts only, so the exact indicator is z = 0 everywhere
    g = np.random.default_rng(3)
    n = 30
    data = LongitudinalDataset(counts=g.integers(1, 50, n), depths=g.integers(100, 1000, n),
                               mean_covariates=g.normal(size=(n, 1)),
                               disp_covariates=g.normal(size=(3, 1)),
                               subject_of=np.repeat(np.arange(3), 10))
    spec = ModelSpec.for_data(data)
    omega = np.array([-3.0, 0.3, -0.2, 0.4, 0.7])
    lam = data.depths * np.exp(-3.0 + 0.3 * data.mean_covariates[:, 0])
    theta = np.exp(-0.2 + 0.4 * data.disp_covariates[data.subject_of, 0])
    p = 1 / (1 + math.exp(-0.7))
    expected = np.sum(math.log(1 - p) + log_pg_pmf(data.counts, lam, theta))
    assert complete_loglik(omega, data, np.zeros(n), spec) == pytest.approx(expected, rel=1e-12)
    assert observed_loglik(omega, data, spec).loglik == pytest.approx(expected, rel=1e-12)


def test_e_step_examples():
    assert e_step(np.zeros(3), single(3), SPEC0)[0] == 0.0
    assert e_step(np.zeros(3), single(0), SPEC0)[0] == pytest.approx(2 / 3)
    assert e_step(np.array([0.0, 0.0, 40.0]), single(0), SPEC0)[0] == pytest.approx(1.0)


def test_e_step_zero_only_for_positive_counts(toy):
    spec = ModelSpec.for_data(toy)
    z = e_step(np.array([-3.0, 0.2, 0.1, 0.3, -0.5, 0.1]), toy, spec)
    assert np.all(z[toy.counts > 0] == 0.0)
    assert np.all((z[toy.counts == 0] > 0) & (z[toy.counts == 0] < 1))


def finite_difference(f, x, h=1e-5):
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def random_case(seed, zi=False):
    g = np.random.default_rng(seed)
    data = small_dataset(seed, n_subjects=4, m=5, zi=zi)
    spec = ModelSpec.for_data(data, variant="zipg-full" if zi else "zipg")
    theta0 = g.uniform(0.05, 5.0)
    p = g.uniform(0.1, 0.9)
    omega = np.concatenate([[math.log(g.uniform(0.01, 0.2))], g.normal(0, 0.3, 2),
                            [math.log(theta0)], g.normal(0, 0.3, 1),
                            [math.log(p / (1 - p))], g.normal(0, 0.5, spec.d3)])
    z = np.where(data.counts == 0, g.uniform(0, 1, data.n_obs), 0.0)
    return data, spec, omega, z


def gradient_errors(seed, zi=False):
    data, spec, omega, z = random_case(seed, zi)
    analytic = grad_complete_loglik(omega, data, z, spec)
    numeric = finite_difference(lambda o: complete_loglik(o, data, z, spec), omega)
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1.0)


def test_gradient_matches_finite_differences_example():
    assert np.all(gradient_errors(0) < 1e-5)


@pytest.mark.parametrize("zi", [False, True])
def test_gradient_matches_finite_differences_50_draws(zi):
    worst = max(gradient_errors(seed, zi).max() for seed in range(50))
    assert worst < 1e-4


def test_gradient_gamma_with_z_zero(toy):
    spec = ModelSpec.for_data(toy)
    omega = np.array([-3.0, 0.2, 0.1, 0.3, -0.5, 0.4])
    p = 1 / (1 + math.exp(-0.4))
    grad = grad_complete_loglik(omega, toy, np.zeros(toy.n_obs), spec)
    assert grad[-1] == pytest.approx(-toy.n_obs * p)


def test_gradient_zero_at_intercept_only_optimum(toy):
    spec = ModelSpec.for_data(toy)
    rest = np.array([0.2, 0.1, 0.3, -0.5, 0.4])
    z = e_step(np.concatenate([[-3.0], rest]), toy, spec)

    def f(b):
        return complete_loglik(np.concatenate([b, rest]), toy, z, spec)

    def g(b):
        return grad_complete_loglik(np.concatenate([b, rest]), toy, z, spec)[:1]

    res = maximize(f, g, [-3.0])
    assert abs(g(res.omega_hat)[0]) < 1e-6


def test_information_criteria():
    bic, aic = information_criteria(0.0, np.zeros(5), math.e)
    assert bic == pytest.approx(5.0)
    assert aic == 10.0
    bic, aic = information_criteria(-100.0, np.zeros(6), 500)
    assert bic == pytest.approx(200 + 6 * math.log(500))
    assert aic < bic
    with pytest.raises(ValueError):
        information_criteria(0.0, np.zeros(2), 0)


def test_em_step_never_decreases_observed_loglik(null_data):
    # one exact E-step followed by a full M-step from 100 random starting points
    _, data, spec = null_data
    design = design_matrices(data, spec)
    g = np.random.default_rng(11)
    restr = Restriction.identity(spec.n_params)
    violations = 0
    for _ in range(100):
        start = np.array([-4.23, 0.0, 0.45, 0.6, 1.0, 0.0]) + g.normal(0, 0.5, spec.n_params)
        before = observed_loglik(start, data, spec).loglik
        u, _, trace, _, _, status = run_em(design, start, restr, FitSettings(), t_max=1)
        assert status == 0
        after = observed_loglik(restr.to_omega(u), data, spec).loglik
        assert trace[0] == pytest.approx(before)
        violations += after < before - 1e-8
    assert violations == 0


def test_observed_loglik_permutation_invariant(null_data):
    _, data, spec = null_data
    omega = np.array([-4.2, 0.1, 0.4, 0.6, 1.0, 0.05])
    perm = np.random.default_rng(0).permutation(data.n_obs)
    shuffled = data.take(perm)
    # subject labels are remapped by take(); the dispersion rows follow them
    a = observed_loglik(omega, data, spec).loglik
    b = observed_loglik(omega, shuffled, spec).loglik
    assert a == pytest.approx(b, rel=1e-12)
