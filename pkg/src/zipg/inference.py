"""Bootstrap Wald tests, likelihood-ratio test, intervals and FDR control."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from . import rng as rngmod
from .em import FitError, FitResult, FitSettings, Restriction, _constant_disp_columns, fit
from .likelihood import NonFiniteLikelihood, e_step, grad_complete_loglik
from .model import LongitudinalDataset, ModelSpec
from .simulation import simulate_from_params

__all__ = [
    "LinearHypothesis",
    "TestReport",
    "ConfidenceInterval",
    "InferenceError",
    "wald_statistic",
    "bootstrap_draws",
    "bootstrap_wald",
    "parametric_bootstrap_wald",
    "likelihood_ratio_test",
    "hessian_wald",
    "confidence_interval",
    "bh_fdr",
    "ks_goodness_of_fit",
    "predictive_quantiles",
]

METHODS = ("bWald", "pbWald", "LRT", "Wald")
CI_METHODS = ("normal", "quantile", "bca")
RESAMPLE_UNITS = ("measurement", "subject")
FAILURE_LIMIT = 0.05

Seed = Union[int, Sequence[int]]


class InferenceError(RuntimeError):
    pass


@dataclass
class LinearHypothesis:
    """H0: A omega = b."""

    a_matrix: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        if a.ndim == 1:
            a = a.reshape(1, -1) if a.size else a.reshape(0, 0)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if a.shape[0] != b.size:
            raise ValueError(f"A has {a.shape[0]} rows but b has length {b.size}")
        r = a.shape[0]
        if r and (r >= a.shape[1] or np.linalg.matrix_rank(a) < r):
            raise ValueError("A must have full row rank r smaller than the parameter count")
        self.a_matrix = a
        self.b = b

    @classmethod
    def coefficient(cls, spec: ModelSpec, name: Union[str, int], value: float = 0.0):
        """Single-coefficient hypothesis by parameter name or index."""
        j = spec.index_of(name) if isinstance(name, str) else int(name)
        a = np.zeros((1, spec.n_params))
        a[0, j] = 1.0
        return cls(a, [value])

    @classmethod
    def empty(cls, spec: ModelSpec):
        return cls(np.zeros((0, spec.n_params)), np.zeros(0))

    @property
    def rank(self) -> int:
        return self.a_matrix.shape[0]

    def restriction(self) -> Restriction:
        if self.rank == 0:
            return Restriction.identity(self.a_matrix.shape[1])
        return Restriction.linear(self.a_matrix, self.b)


@dataclass
class TestReport:
    statistic: float
    df: int
    p_value: float
    method: str
    estimate: np.ndarray
    covariance: Optional[np.ndarray] = None
    n_bootstrap: int = 0
    n_bootstrap_failed: int = 0
    unreliable: bool = False
    note: str = ""
    draws: Optional[np.ndarray] = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "method": self.method,
            "estimate": self.estimate.tolist(),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "n_bootstrap": self.n_bootstrap,
            "n_bootstrap_failed": self.n_bootstrap_failed,
            "unreliable": self.unreliable,
            "note": self.note,
        }


@dataclass
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    method: str


def _key(seed: Seed) -> tuple:
    return tuple(int(s) for s in np.atleast_1d(seed))


def _stream(seed: Seed, *key) -> np.random.Generator:
    root = _key(seed)
    return rngmod.stream(root[0], *root[1:], *key)


def _map(fn: Callable, items, workers: int) -> list:
    if workers is None or workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _chi2_p(statistic: float, df: int) -> float:
    if df == 0:
        return 1.0
    return float(stats.chi2.sf(statistic, df))


def wald_statistic(omega: np.ndarray, covariance: np.ndarray, hypothesis: LinearHypothesis
                   ) -> float:
    a = hypothesis.a_matrix
    r = a @ omega - hypothesis.b
    s = a @ covariance @ a.T
    if r.size == 0:
        return 0.0
    if not np.all(np.isfinite(s)):
        raise InferenceError("bootstrap covariance is not finite")
    scale = np.sqrt(np.diag(s))
    if np.any(scale <= 0):
        raise InferenceError("A V A^T is singular; increase the number of bootstrap samples")
    # work with the correlation form so the condition check is scale-free
    corr = s / np.outer(scale, scale)
    if np.linalg.cond(corr) > 1e12:
        raise InferenceError("A V A^T is singular; increase the number of bootstrap samples")
    y = r / scale
    return float(y @ np.linalg.solve(corr, y))


# ---------------------------------------------------------------------------
# bootstrap machinery
# ---------------------------------------------------------------------------

def _safe_fit(data, spec, settings, start=None, restriction=None) -> Optional[FitResult]:
    if _constant_disp_columns(data):
        return None
    try:
        return fit(data, spec, settings, start=start, restriction=restriction)
    except (FitError, NonFiniteLikelihood, FloatingPointError, np.linalg.LinAlgError):
        return None


def _resample_rows(data: LongitudinalDataset, unit: str, g: np.random.Generator) -> np.ndarray:
    if unit == "measurement":
        return g.integers(0, data.n_obs, data.n_obs)
    subjects = g.integers(0, data.n_subjects, data.n_subjects)
    members = [np.flatnonzero(data.subject_of == s) for s in range(data.n_subjects)]
    return np.concatenate([members[s] for s in subjects])


def bootstrap_draws(data: LongitudinalDataset, spec: ModelSpec, base: FitResult, B: int,
                    resample_unit: str = "measurement", seed: Seed = 0, workers: int = 1,
                    settings: Optional[FitSettings] = None) -> np.ndarray:
    """Refit on B resamples; rows of failed refits are NaN.

    Resamples are refit from the base estimate (warm start).
    """
    if resample_unit not in RESAMPLE_UNITS:
        raise ValueError(f"resample_unit must be one of {RESAMPLE_UNITS}")
    settings = settings or FitSettings()
    start = base.params

    def one(b):
        g = _stream(seed, rngmod.BOOTSTRAP, b)
        boot = data.take(_resample_rows(data, resample_unit, g))
        res = _safe_fit(boot, spec, settings, start=start)
        return np.full(spec.n_params, np.nan) if res is None else res.params

    return np.array(_map(one, range(B), workers)).reshape(B, spec.n_params)


def _report_from_draws(method, base_omega, draws, hypothesis, note="") -> TestReport:
    ok = np.all(np.isfinite(draws), axis=1)
    n_failed = int(np.sum(~ok))
    good = draws[ok]
    if good.shape[0] < 2:
        raise InferenceError(f"only {good.shape[0]} bootstrap refits succeeded")
    cov = np.cov(good, rowvar=False, ddof=1).reshape(draws.shape[1], draws.shape[1])
    stat = wald_statistic(base_omega, cov, hypothesis)
    unreliable = n_failed > FAILURE_LIMIT * draws.shape[0]
    if unreliable:
        note = (note + "; " if note else "") + f"{n_failed} of {draws.shape[0]} refits failed"
    return TestReport(
        statistic=stat,
        df=hypothesis.rank,
        p_value=_chi2_p(stat, hypothesis.rank),
        method=method,
        estimate=np.asarray(base_omega, dtype=float),
        covariance=cov,
        n_bootstrap=draws.shape[0],
        n_bootstrap_failed=n_failed,
        unreliable=unreliable,
        note=note,
        draws=draws,
    )


def bootstrap_wald(data: LongitudinalDataset, spec: ModelSpec, hypothesis: LinearHypothesis,
                   B: int = 200, resample_unit: str = "measurement", seed: Seed = 0,
                   workers: int = 1, settings: Optional[FitSettings] = None,
                   base: Optional[FitResult] = None) -> TestReport:
    """Wald test with a nonparametric bootstrap covariance."""
    if B < 50:
        raise ValueError("B must be at least 50")
    settings = settings or FitSettings()
    base = base or fit(data, spec, settings)
    draws = bootstrap_draws(data, spec, base, B, resample_unit, seed, workers, settings)
    return _report_from_draws("bWald", base.params, draws, hypothesis)


def parametric_bootstrap_wald(data: LongitudinalDataset, spec: ModelSpec,
                              hypothesis: LinearHypothesis, B: int = 200, seed: Seed = 0,
                              workers: int = 1, settings: Optional[FitSettings] = None,
                              base: Optional[FitResult] = None) -> TestReport:
    """Wald test whose covariance comes from data simulated under the null fit.

    Simulated datasets keep the observed covariates and depths.
    """
    if B < 50:
        raise ValueError("B must be at least 50")
    settings = settings or FitSettings()
    base = base or fit(data, spec, settings)
    null = fit(data, spec, settings, restriction=hypothesis.restriction())
    null_omega = null.params

    def one(b):
        g = _stream(seed, rngmod.PARAMETRIC, b)
        counts = simulate_from_params(null_omega, data, spec, g)[0]
        if not np.any(counts):
            return np.full(spec.n_params, np.nan)
        res = _safe_fit(data.with_counts(counts), spec, settings, start=null_omega)
        return np.full(spec.n_params, np.nan) if res is None else res.params

    draws = np.array(_map(one, range(B), workers)).reshape(B, spec.n_params)
    return _report_from_draws("pbWald", base.params, draws, hypothesis)


def likelihood_ratio_test(data: LongitudinalDataset, spec: ModelSpec,
                          hypothesis: LinearHypothesis, seed: Seed = 0,
                          settings: Optional[FitSettings] = None,
                          base: Optional[FitResult] = None) -> TestReport:
    """Likelihood-ratio test of a linear restriction (deterministic; seed unused)."""
    settings = settings or FitSettings()
    full = base or fit(data, spec, settings)
    if hypothesis.rank == 0:
        return TestReport(0.0, 0, 1.0, "LRT", full.params)
    null = fit(data, spec, settings, restriction=hypothesis.restriction())
    note = ""
    if full.loglik < null.loglik:
        # the null estimate is feasible for the full model; ascend from it
        refit = fit(data, spec, settings, start=null.params)
        if refit.loglik > full.loglik:
            full = refit
            note = "full model refit from the null estimate"
    stat = 2.0 * (full.loglik - null.loglik)
    unreliable = stat < -1e-6
    if unreliable:
        note = "full log-likelihood below the null log-likelihood"
    stat = max(stat, 0.0)
    return TestReport(stat, hypothesis.rank, _chi2_p(stat, hypothesis.rank), "LRT",
                      full.params, unreliable=unreliable, note=note)


def hessian_wald(data: LongitudinalDataset, spec: ModelSpec, hypothesis: LinearHypothesis,
                 settings: Optional[FitSettings] = None, base: Optional[FitResult] = None,
                 diagnostics: bool = False, step: float = 1e-5) -> TestReport:
    """Wald test from the inverse observed information (diagnostics only).

    Bootstrap covariances are the supported route; the observed information
    can understate the variance.
    """
    if not diagnostics:
        raise InferenceError("Hessian-based Wald is a diagnostic; pass diagnostics=True")
    settings = settings or FitSettings()
    base = base or fit(data, spec, settings)
    omega = base.params
    k = omega.size

    def score(o):
        # observed-data score equals the complete-data gradient at the posterior z
        return grad_complete_loglik(o, data, e_step(o, data, spec), spec)

    hess = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = step
        hess[:, j] = (score(omega + e) - score(omega - e)) / (2 * step)
    hess = 0.5 * (hess + hess.T)
    cov = np.linalg.inv(-hess)
    stat = wald_statistic(omega, cov, hypothesis)
    return TestReport(stat, hypothesis.rank, _chi2_p(stat, hypothesis.rank), "Wald", omega,
                      covariance=cov, note="observed information")


# ---------------------------------------------------------------------------
# intervals, multiplicity, goodness of fit
# ---------------------------------------------------------------------------

def jackknife_estimates(data: LongitudinalDataset, spec: ModelSpec, base: FitResult,
                        coordinate: int, settings: Optional[FitSettings] = None,
                        workers: int = 1) -> np.ndarray:
    """Leave-one-measurement-out estimates of one coordinate."""
    settings = settings or FitSettings()
    idx = np.arange(data.n_obs)

    def one(i):
        res = _safe_fit(data.take(np.delete(idx, i)), spec, settings, start=base.params)
        return np.nan if res is None else res.params[coordinate]

    return np.array(_map(one, range(data.n_obs), workers))


def confidence_interval(fit_result: FitResult, bootstrap_draws: np.ndarray, coordinate: int,
                        level: float = 0.95, method: str = "normal",
                        jackknife: Optional[np.ndarray] = None,
                        data: Optional[LongitudinalDataset] = None,
                        settings: Optional[FitSettings] = None) -> ConfidenceInterval:
    """Bootstrap interval for one coordinate.

    ``bca`` needs jackknife estimates, either given or computed from ``data``.
    Rows of ``bootstrap_draws`` containing NaN are ignored.
    """
    if method not in CI_METHODS:
        raise ValueError(f"method must be one of {CI_METHODS}")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    draws = np.asarray(bootstrap_draws, dtype=float)
    draws = draws[np.all(np.isfinite(draws), axis=1)] if draws.ndim == 2 else draws
    x = draws[:, coordinate] if draws.ndim == 2 else draws
    if x.size < 2:
        raise InferenceError("need at least two bootstrap draws")
    est = float(fit_result.params[coordinate])
    alpha = 1.0 - level

    if method == "normal":
        sd = 0.0 if np.ptp(x) == 0.0 else np.std(x, ddof=1)
        half = stats.norm.ppf(1.0 - alpha / 2) * sd
        return ConfidenceInterval(est - half, est + half, level, method)
    if method == "quantile":
        lo, hi = np.quantile(x, [alpha / 2, 1.0 - alpha / 2])
        return ConfidenceInterval(float(lo), float(hi), level, method)

    frac = np.mean(x < est)
    if jackknife is None:
        if data is None:
            raise ValueError("bca needs jackknife estimates or the data to compute them")
        jackknife = jackknife_estimates(data, fit_result.spec, fit_result, coordinate, settings)
    jk = np.asarray(jackknife, dtype=float)
    jk = jk[np.isfinite(jk)]
    dev = jk.mean() - jk if jk.size else jk
    ss = np.sum(dev ** 2)
    if not 0.0 < frac < 1.0 or jk.size < 2 or ss <= 0.0:
        warnings.warn("bca: degenerate bias correction or jackknife; using quantile interval",
                      stacklevel=2)
        return confidence_interval(fit_result, x.reshape(-1, 1), 0, level, "quantile")
    z0 = stats.norm.ppf(frac)
    accel = np.sum(dev ** 3) / (6.0 * ss ** 1.5)
    za = stats.norm.ppf([alpha / 2, 1.0 - alpha / 2])
    adj = stats.norm.cdf(z0 + (z0 + za) / (1.0 - accel * (z0 + za)))
    lo, hi = np.quantile(x, adj)
    return ConfidenceInterval(float(lo), float(hi), level, method)


def bh_fdr(p_values, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up; returns (rejected, adjusted q-values)."""
    p = np.asarray(p_values, dtype=float).reshape(-1)
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return np.zeros(0, bool), np.zeros(0)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    qv = np.empty(m)
    qv[order] = np.minimum(adj, 1.0)
    return qv <= q, qv


def ks_goodness_of_fit(data: LongitudinalDataset, fit_result: FitResult, seed: Seed = 0,
                       factor: int = 10) -> tuple[float, float]:
    """Two-sample KS between observed counts and a sample from the fitted model.

    The model sample is ``factor`` copies of the observed design.  Counts are
    discrete, so the asymptotic p-value is conservative.
    """
    g = _stream(seed, rngmod.GOF, 0)
    sim = simulate_from_params(fit_result.params, data, fit_result.spec, g, copies=factor)
    res = stats.ks_2samp(data.counts, sim.ravel(), method="asymp")
    return float(res.statistic), float(res.pvalue)


def predictive_quantiles(data: LongitudinalDataset, fit_result: FitResult, seed: Seed = 0,
                         probs=None, factor: int = 10) -> np.ndarray:
    """Rows of (prob, observed quantile, predicted quantile)."""
    probs = np.linspace(0.05, 0.95, 19) if probs is None else np.asarray(probs, dtype=float)
    g = _stream(seed, rngmod.GOF, 0)
    sim = simulate_from_params(fit_result.params, data, fit_result.spec, g, copies=factor)
    return np.column_stack([probs, np.quantile(data.counts, probs), np.quantile(sim, probs)])
