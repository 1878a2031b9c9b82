"""Synthetic longitudinal count data and the Monte Carlo harness."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .model import POISSON_FLOOR, LongitudinalDataset, ModelSpec, link_params, logistic
from . import rng as rngmod

GENERATORS = ("zipg", "pg", "zi-beta-binomial")
DEPTH_MODELS = ("log-normal", "constant", "empirical-file")


@dataclass
class ScenarioConfig:
    """One simulation design.

    Mean covariates are drawn from ``(X1, X2)`` with ``X1`` a per-subject
    Bernoulli(0.5) group indicator and ``X2`` a subject-level N(0, 1) draw plus
    per-measurement noise; only the first ``len(beta)`` columns are used.  The
    dispersion covariates are the first ``len(beta_star)`` of ``(X1,)``.
    """

    n_subjects: int = 20
    n_measurements: Union[int, Sequence[int]] = 25
    beta0: float = -4.23
    beta: Sequence[float] = (0.0, 0.45)
    beta_star0: float = 0.6
    beta_star: Sequence[float] = (1.0,)
    p: float = 0.5
    gamma: Optional[Sequence[float]] = None
    depth_model: str = "log-normal"
    depth_mu: float = 9.0
    depth_sigma: float = 0.5
    depth_constant: float = 10000.0
    depth_file: Optional[str] = None
    generator: str = "zipg"
    noise_var: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.depth_model not in DEPTH_MODELS:
            raise ValueError(f"unknown depth model {self.depth_model!r}")
        if self.gamma is None and not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if len(self.beta) > 2 or len(self.beta_star) > 1:
            raise ValueError("at most two mean covariates and one dispersion covariate")
        self.beta = tuple(float(b) for b in self.beta)
        self.beta_star = tuple(float(b) for b in self.beta_star)
        if self.gamma is not None:
            self.gamma = tuple(float(g) for g in self.gamma)
        if self.depth_model == "empirical-file" and not self.depth_file:
            raise ValueError("empirical-file depth model needs depth_file")

    @property
    def full_variant(self) -> bool:
        return self.gamma is not None and len(self.gamma) > 1

    @property
    def gamma_vector(self) -> np.ndarray:
        if self.gamma is not None:
            return np.asarray(self.gamma, dtype=float)
        return np.array([math.log(self.p) - math.log1p(-self.p)])

    def measurements(self) -> np.ndarray:
        m = np.atleast_1d(np.asarray(self.n_measurements, dtype=np.int64))
        if m.size == 1:
            m = np.full(self.n_subjects, int(m[0]))
        if m.size != self.n_subjects or np.any(m < 1):
            raise ValueError("n_measurements must be positive, scalar or one per subject")
        return m

    def true_params(self) -> np.ndarray:
        return np.concatenate(([self.beta0], self.beta, [self.beta_star0], self.beta_star,
                               self.gamma_vector))

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(d["n_measurements"], int):
            d["n_measurements"] = [int(v) for v in d["n_measurements"]]
        for key in ("beta", "beta_star", "gamma"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


def generate_covariates(config: ScenarioConfig, rng: np.random.Generator):
    """Return (X, X_star, subject_of) for one simulated cohort.

    ``X`` has columns (X1, X2) per observation; ``X_star`` is X1 per subject.
    """
    m = config.measurements()
    subject_of = np.repeat(np.arange(config.n_subjects), m)
    x1 = rng.binomial(1, 0.5, size=config.n_subjects).astype(float)
    x2_subject = rng.normal(0.0, 1.0, size=config.n_subjects)
    eps = rng.normal(0.0, math.sqrt(config.noise_var), size=subject_of.size)
    x = np.column_stack([x1[subject_of], x2_subject[subject_of] + eps])
    return x, x1.reshape(-1, 1), subject_of


_depth_cache: dict = {}


def _empirical_depths(path: str) -> np.ndarray:
    if path not in _depth_cache:
        vals = np.loadtxt(path, dtype=float, ndmin=1)
        if vals.size == 0 or np.any(vals <= 0):
            raise ValueError(f"{path}: depths must be positive")
        _depth_cache[path] = vals
    return _depth_cache[path]


def generate_depths(config: ScenarioConfig, n_obs: int, rng: np.random.Generator) -> np.ndarray:
    if config.depth_model == "log-normal":
        d = np.round(np.exp(rng.normal(config.depth_mu, config.depth_sigma, size=n_obs)))
        return np.maximum(d, 1.0)
    if config.depth_model == "constant":
        return np.full(n_obs, float(config.depth_constant))
    return rng.choice(_empirical_depths(config.depth_file), size=n_obs, replace=True)


def generate_counts(config: ScenarioConfig, x, x_star, depths, rng: np.random.Generator,
                    subject_of=None) -> np.ndarray:
    """Draw counts from the configured generator given covariates and depths."""
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    depths = np.asarray(depths, dtype=float)
    n_obs = depths.size
    if subject_of is None:
        subject_of = np.arange(n_obs)
    k1 = len(config.beta)
    k2 = len(config.beta_star)
    eta = config.beta0 + x[:, :k1] @ np.asarray(config.beta) + np.log(depths)
    lam = np.exp(eta)
    eta_s = config.beta_star0 + x_star[:, :k2] @ np.asarray(config.beta_star)
    theta = np.exp(eta_s)[subject_of]
    g = config.gamma_vector
    if g.size > 1:
        zi_design = np.column_stack([np.ones(n_obs), x[:, :g.size - 1]])
        p = logistic(zi_design @ g)
    else:
        p = np.full(n_obs, float(logistic(g[0])))

    if config.generator == "zi-beta-binomial":
        counts = _beta_binomial(lam, theta, depths, rng)
    else:
        u = rng.gamma(shape=1.0 / theta, scale=theta)
        counts = rng.poisson(lam * u)
    if config.generator != "pg":
        counts = np.where(rng.random(n_obs) < p, 0, counts)
    return counts.astype(np.int64)


def _beta_binomial(lam, theta, depths, rng):
    # Beta-Binomial with mean lam and variance matched to lam * (1 + lam * theta)
    n = np.maximum(depths, 2.0)
    mu = np.clip(lam / n, 1e-12, 1.0 - 1e-9)
    rho = ((1.0 + lam * theta) / (1.0 - mu) - 1.0) / (n - 1.0)
    rho = np.clip(rho, 1e-12, 1.0 - 1e-9)
    conc = 1.0 / rho - 1.0
    pi = rng.beta(mu * conc, (1.0 - mu) * conc)
    return rng.binomial(n.astype(np.int64), pi)


def simulate_dataset(config: ScenarioConfig, rng: np.random.Generator) -> LongitudinalDataset:
    x, x_star, subject_of = generate_covariates(config, rng)
    depths = generate_depths(config, subject_of.size, rng)
    counts = generate_counts(config, x, x_star, depths, rng, subject_of)
    k1 = len(config.beta)
    k2 = len(config.beta_star)
    zi = x[:, :len(config.gamma) - 1] if config.full_variant else None
    return LongitudinalDataset(
        counts=counts,
        depths=depths,
        mean_covariates=x[:, :k1],
        disp_covariates=x_star[:, :k2],
        subject_of=subject_of,
        zi_covariates=zi,
    )


def simulate_from_params(omega, data: LongitudinalDataset, spec: ModelSpec,
                         rng: np.random.Generator, copies: int = 1) -> np.ndarray:
    """Counts drawn from the fitted law at the design of ``data``.

    Returns shape (copies, n_obs); covariates and depths are reused as given.
    """
    linked = link_params(omega, data, spec)
    lam = linked.lam
    theta = linked.theta[data.subject_of]
    p = np.broadcast_to(linked.p, lam.shape)
    out = np.empty((copies, data.n_obs), dtype=np.int64)
    tiny = theta < POISSON_FLOOR
    safe = np.where(tiny, 1.0, theta)
    for c in range(copies):
        u = np.where(tiny, 1.0, rng.gamma(shape=1.0 / safe, scale=safe))
        w = rng.poisson(lam * u)
        out[c] = np.where(rng.random(data.n_obs) < p, 0, w)
    return out


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

TEST_METHODS = ("bWald", "pbWald", "LRT")
FAILURE_LIMIT = 0.05


class ExperimentError(RuntimeError):
    pass


@dataclass
class ReplicateRecord:
    index: int
    estimate: Optional[np.ndarray] = None
    boot_se: Optional[np.ndarray] = None
    ci: Optional[np.ndarray] = None
    p_values: dict = field(default_factory=dict)
    n_em_iterations: int = 0
    boot_failed: int = 0
    failed: bool = False
    reason: str = ""


@dataclass
class MonteCarloSummary:
    """Per-parameter aggregates over successful replicates.

    ``bias_se`` is the standard deviation of the estimates; it and the other
    spread measures are None when fewer than two replicates succeed.
    """

    names: list
    truth: np.ndarray
    L: int
    n_failed: int
    avg_bias: np.ndarray
    bias_se: Optional[np.ndarray]
    avg_se: Optional[np.ndarray]
    rmse: np.ndarray
    coverage: Optional[np.ndarray]
    rejection_rate: dict
    alpha: float
    level: float
    replicates: list = field(default_factory=list, repr=False)

    def row(self, name: str) -> dict:
        j = self.names.index(name)

        def pick(v):
            return None if v is None else float(v[j])

        return {"parameter": name, "truth": float(self.truth[j]),
                "avg_bias": float(self.avg_bias[j]), "bias_se": pick(self.bias_se),
                "avg_se": pick(self.avg_se), "rmse": float(self.rmse[j]),
                "coverage": pick(self.coverage)}

    def as_dict(self) -> dict:
        return {
            "L": self.L,
            "n_failed": self.n_failed,
            "alpha": self.alpha,
            "level": self.level,
            "parameters": [self.row(n) for n in self.names],
            "rejection_rate": dict(self.rejection_rate),
        }


def parse_test(test: str) -> tuple[str, str]:
    """``"bWald:beta1"`` -> ("bWald", "beta1"); the null is coefficient = 0."""
    method, _, name = test.partition(":")
    if method not in TEST_METHODS or not name:
        raise ValueError(f"bad test {test!r}; expected METHOD:parameter with METHOD in "
                         f"{TEST_METHODS}")
    return method, name


def run_replicate(scenario: ScenarioConfig, index: int, B: int = 200, tests=(),
                  seed: Optional[int] = None, level: float = 0.95, ci_method: str = "normal",
                  resample_unit: str = "measurement", settings=None,
                  coverage: bool = True) -> ReplicateRecord:
    """Simulate, fit, bootstrap and test one replicate.

    The resampling bootstrap runs when ``B > 0`` and either a bWald test or
    ``coverage`` needs it.
    """
    from .em import FitError, FitSettings, fit
    from .inference import (
        InferenceError, LinearHypothesis, _report_from_draws, bootstrap_draws,
        confidence_interval, likelihood_ratio_test, parametric_bootstrap_wald)
    from .likelihood import NonFiniteLikelihood

    seed = scenario.seed if seed is None else seed
    settings = settings or FitSettings()
    rec = ReplicateRecord(index)
    data = simulate_dataset(scenario, rngmod.stream(seed, rngmod.DATA, index))
    spec = ModelSpec.for_data(data, variant="zipg-full" if scenario.full_variant else "zipg")
    try:
        base = fit(data, spec, settings)
    except (FitError, NonFiniteLikelihood, FloatingPointError) as err:
        rec.failed = True
        rec.reason = str(err)
        return rec
    rec.estimate = base.params
    rec.n_em_iterations = base.n_em_iterations
    key = (seed, index)
    parsed = [parse_test(t) for t in tests]
    try:
        draws = None
        if B > 0 and (coverage or any(m == "bWald" for m, _ in parsed)):
            draws = bootstrap_draws(data, spec, base, B, resample_unit, key, settings=settings)
            ok = np.all(np.isfinite(draws), axis=1)
            rec.boot_failed = int(np.sum(~ok))
            rec.boot_se = np.std(draws[ok], axis=0, ddof=1)
            if coverage:
                rec.ci = np.array([
                    [ci.lower, ci.upper]
                    for ci in (confidence_interval(base, draws, j, level, ci_method, data=data,
                                                   settings=settings)
                               for j in range(spec.n_params))])
        for (method, name), label in zip(parsed, tests):
            hyp = LinearHypothesis.coefficient(spec, name)
            if method == "bWald":
                if draws is None:
                    raise ValueError("bWald needs B > 0")
                rep = _report_from_draws("bWald", base.params, draws, hyp)
            elif method == "pbWald":
                rep = parametric_bootstrap_wald(data, spec, hyp, B, key, settings=settings,
                                                base=base)
            else:
                rep = likelihood_ratio_test(data, spec, hyp, settings=settings, base=base)
            rec.p_values[label] = rep.p_value
    except InferenceError as err:
        rec.failed = True
        rec.reason = str(err)
    return rec


def summarize(records: list, truth: np.ndarray, names: list, tests=(), alpha: float = 0.05,
              level: float = 0.95, L: Optional[int] = None) -> MonteCarloSummary:
    ok = [r for r in records if not r.failed]
    if not ok:
        raise ExperimentError("every replicate failed")
    est = np.array([r.estimate for r in ok])
    err = est - truth
    spread = len(ok) > 1
    have_boot = all(r.boot_se is not None for r in ok)
    cover = None
    if all(r.ci is not None for r in ok):
        ci = np.array([r.ci for r in ok])
        cover = np.mean((ci[:, :, 0] <= truth) & (truth <= ci[:, :, 1]), axis=0)
    return MonteCarloSummary(
        names=list(names),
        truth=truth,
        L=len(records) if L is None else L,
        n_failed=len(records) - len(ok),
        avg_bias=err.mean(axis=0),
        bias_se=est.std(axis=0, ddof=1) if spread else None,
        avg_se=np.mean([r.boot_se for r in ok], axis=0) if have_boot else None,
        rmse=np.sqrt(np.mean(err ** 2, axis=0)),
        coverage=cover,
        rejection_rate={t: float(np.mean([r.p_values[t] < alpha for r in ok])) for t in tests},
        alpha=alpha,
        level=level,
        replicates=records,
    )


def run_experiment(scenario: ScenarioConfig, L: int, B: int = 200, tests=("bWald:beta1",),
                   workers: int = 1, seed: Optional[int] = None, alpha: float = 0.05,
                   level: float = 0.95, ci_method: str = "normal",
                   resample_unit: str = "measurement", settings=None,
                   coverage: bool = True, progress=None) -> MonteCarloSummary:
    """Run L seeded replicates and aggregate bias, SE, RMSE, coverage, rejection rates.

    Replicate ``l`` draws from streams keyed by (seed, l) only, so the summary
    does not depend on ``workers``.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    tests = tuple(tests)
    for t in tests:
        parse_test(t)

    def one(index):
        rec = run_replicate(scenario, index, B, tests, seed, level, ci_method, resample_unit,
                            settings, coverage)
        if progress is not None:
            progress(rec)
        return rec

    if workers is None or workers <= 1:
        records = [one(i) for i in range(L)]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(L)))
    n_failed = sum(r.failed for r in records)
    if n_failed > FAILURE_LIMIT * L:
        reasons = sorted({r.reason for r in records if r.failed})
        raise ExperimentError(f"{n_failed} of {L} replicates failed: {reasons[:5]}")
    spec = ModelSpec(len(scenario.beta), len(scenario.beta_star),
                     scenario.gamma_vector.size - 1,
                     variant="zipg-full" if scenario.full_variant else "zipg")
    return summarize(records, scenario.true_params(), spec.param_names(), tests, alpha, level, L)


def bic_scenario(gamma1: float, n_subjects: int = 20, n_measurements=25, beta=(0.0,),
                 beta_star=(1.0,), **kwargs) -> ScenarioConfig:
    """Group-covariate design with covariate-linked zero inflation."""
    return ScenarioConfig(n_subjects=n_subjects, n_measurements=n_measurements, beta0=-4.23,
                          beta=beta, beta_star0=0.6, beta_star=beta_star,
                          gamma=(-0.847, float(gamma1)), **kwargs)


def sensitivity_bic_experiment(gamma1_grid, L: int, seed: int = 0, workers: int = 1,
                               settings=None, **scenario_kwargs) -> np.ndarray:
    """Fraction of replicates where the constant-p model has the smaller BIC."""
    from .em import FitError, fit, fit_full
    from .likelihood import NonFiniteLikelihood

    grid = np.asarray(gamma1_grid, dtype=float).reshape(-1)
    if np.any(grid < 0):
        raise ValueError("gamma1 grid values must be nonnegative")
    out = np.empty(grid.size)
    for gi, g1 in enumerate(grid):
        scenario = bic_scenario(g1, seed=seed, **scenario_kwargs)

        def one(index):
            data = simulate_dataset(scenario, rngmod.stream(seed, rngmod.DATA, gi, index))
            try:
                small = fit(data, ModelSpec.for_data(data, variant="zipg"), settings)
                full = fit_full(data, settings=settings)
            except (FitError, NonFiniteLikelihood, FloatingPointError):
                return None
            return small.bic < full.bic

        if workers is None or workers <= 1:
            wins = [one(i) for i in range(L)]
        else:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                wins = list(pool.map(one, range(L)))
        done = [w for w in wins if w is not None]
        if len(wins) - len(done) > FAILURE_LIMIT * L:
            raise ExperimentError(f"gamma1={g1}: {len(wins) - len(done)} of {L} fits failed")
        out[gi] = float(np.mean(done))
    return out
