"""Zero-inflated Poisson-Gamma probability model.

Counts follow a two-part hierarchy: with probability ``p`` a structural zero,
otherwise ``Poisson(lambda * U)`` with ``U ~ Gamma(shape=1/theta, scale=theta)``
so that ``E[U] = 1`` and ``Var[U] = theta``.  Both ``lambda`` (per observation)
and ``theta`` (per subject) use log links; ``p`` uses a logit link.

Everything in here works in log space.  The scalar kernels are compiled with
numba because the fitter evaluates them millions of times.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numba
import numpy as np
from scipy.special import gammaln

__all__ = [
    "POISSON_FLOOR",
    "ParamVector",
    "LongitudinalDataset",
    "ModelSpec",
    "LinkedParams",
    "DimensionError",
    "link_params",
    "logistic",
    "gamma_of_p",
    "log_pg_pmf",
    "pg_moments",
    "digamma",
    "design_matrices",
]

# Below this dispersion the PG law is evaluated as its Poisson limit.
POISSON_FLOOR = 1e-8

OFFSET_MODES = ("log-depth", "log-median-of-ratios", "none")
VARIANTS = ("zipg", "zipg-full")


class DimensionError(ValueError):
    """Raised when a covariate matrix does not match the model spec."""

    def __init__(self, matrix: str, expected, got):
        self.matrix = matrix
        self.expected = expected
        self.got = got
        super().__init__(f"{matrix}: expected shape {expected}, got {got}")


# ---------------------------------------------------------------------------
# scalar kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _softplus(x):
    # log(1 + exp(x)) without overflow
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True, nogil=True)
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True, nogil=True)
def _digamma(x):
    # recurrence up to x >= 6, then the asymptotic series through x**-14
    r = 0.0
    while x < 6.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    t = f * (-1.0 / 12 + f * (1.0 / 120 + f * (-1.0 / 252 + f * (
        1.0 / 240 + f * (-1.0 / 132 + f * (691.0 / 32760 + f * (-1.0 / 12)))))))
    return r + math.log(x) - 0.5 / x + t


@numba.njit(cache=True, nogil=True)
def _log_pg(w, eta, eta_s, lgw1, floor):
    """log P_PG(w) with log-mean ``eta`` and log-dispersion ``eta_s``.

    ``lgw1`` is lgamma(w + 1), precomputed by the caller.  Dispersion below
    ``floor`` uses the Poisson limit.
    """
    theta = math.exp(eta_s)
    if theta < floor:
        return w * eta - math.exp(eta) - lgw1
    a = 1.0 / theta
    x = eta + eta_s
    out = -w * _softplus(-x) - a * _softplus(x) - lgw1
    if w > 0.0:
        out += math.lgamma(w + a) - math.lgamma(a)
    return out


@numba.vectorize(["float64(float64)"], cache=True)
def digamma(x):
    """Digamma function for positive arguments."""
    return _digamma(x)


@numba.vectorize(["float64(float64, float64, float64, float64)"], cache=True)
def _log_pg_ufunc(w, eta, eta_s, floor):
    return _log_pg(w, eta, eta_s, math.lgamma(w + 1.0), floor)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Which covariates enter which part of the model.

    ``d1`` mean covariates, ``d2`` dispersion covariates and, for the
    ``zipg-full`` variant only, ``d3`` zero-inflation covariates.
    """

    d1: int
    d2: int
    d3: int = 0
    offset_mode: str = "log-depth"
    variant: str = "zipg"

    def __post_init__(self):
        if self.offset_mode not in OFFSET_MODES:
            raise ValueError(f"unknown offset_mode {self.offset_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "zipg" and self.d3 > 0:
            raise ValueError("d3 > 0 requires variant='zipg-full'")
        if min(self.d1, self.d2, self.d3) < 0:
            raise ValueError("column counts must be nonnegative")

    @property
    def n_gamma(self) -> int:
        return self.d3 + 1

    @property
    def n_params(self) -> int:
        return self.d1 + self.d2 + self.d3 + 3

    @property
    def beta_slice(self) -> slice:
        return slice(0, self.d1 + 1)

    @property
    def beta_star_slice(self) -> slice:
        return slice(self.d1 + 1, self.d1 + self.d2 + 2)

    @property
    def gamma_slice(self) -> slice:
        return slice(self.d1 + self.d2 + 2, self.n_params)

    def param_names(self) -> list[str]:
        names = ["beta0"] + [f"beta{k}" for k in range(1, self.d1 + 1)]
        names += ["beta_star0"] + [f"beta_star{k}" for k in range(1, self.d2 + 1)]
        names += ["gamma0"] + [f"gamma{k}" for k in range(1, self.d3 + 1)]
        if self.d3 == 0:
            names[-1] = "gamma"
        return names

    def index_of(self, name: str) -> int:
        return self.param_names().index(name)

    @classmethod
    def for_data(cls, data: "LongitudinalDataset", variant: str = "zipg",
                 offset_mode: str = "log-depth") -> "ModelSpec":
        d3 = 0
        if variant == "zipg-full":
            if data.zi_covariates is None:
                raise ValueError("zipg-full needs zi_covariates")
            d3 = data.zi_covariates.shape[1]
        return cls(data.mean_covariates.shape[1], data.disp_covariates.shape[1],
                   d3, offset_mode, variant)


@dataclass
class ParamVector:
    """Full parameter set in unconstrained coordinates."""

    beta0: float
    beta: np.ndarray
    beta_star0: float
    beta_star: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.beta0 = float(self.beta0)
        self.beta_star0 = float(self.beta_star0)
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.beta_star = np.atleast_1d(np.asarray(self.beta_star, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if self.gamma.size < 1:
            raise ValueError("gamma needs at least the intercept")
        if not np.all(np.isfinite(self.to_array())):
            raise ValueError("ParamVector entries must be finite")

    def to_array(self) -> np.ndarray:
        return np.concatenate(([self.beta0], self.beta, [self.beta_star0],
                               self.beta_star, self.gamma))

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr if dtype is None else arr.astype(dtype)

    def __len__(self):
        return self.beta.size + self.beta_star.size + self.gamma.size + 2

    @classmethod
    def from_array(cls, arr, spec: ModelSpec) -> "ParamVector":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (spec.n_params,):
            raise DimensionError("omega", (spec.n_params,), arr.shape)
        d1, d2 = spec.d1, spec.d2
        return cls(arr[0], arr[1:d1 + 1], arr[d1 + 1], arr[d1 + 2:d1 + d2 + 2],
                   arr[d1 + d2 + 2:])

    @property
    def p(self) -> float:
        """Zero-inflation mass at zero covariates."""
        return float(logistic(self.gamma[0]))


@dataclass
class LongitudinalDataset:
    """Counts of one taxon with per-observation and per-subject covariates.

    Observations are rows; ``subject_of[k]`` gives the subject of row ``k``.
    ``disp_covariates`` has one row per subject.
    """

    counts: np.ndarray
    depths: np.ndarray
    mean_covariates: np.ndarray
    disp_covariates: np.ndarray
    subject_of: np.ndarray
    zi_covariates: Optional[np.ndarray] = None
    size_factors: Optional[np.ndarray] = None
    name: str = ""
    subject_ids: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if counts.size == 0:
            raise ValueError("empty dataset")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("counts must be nonnegative integers")
        self.counts = counts.astype(np.int64)
        n_obs = self.counts.size
        self.depths = np.asarray(self.depths, dtype=float).reshape(-1)
        if self.depths.shape != (n_obs,):
            raise DimensionError("depths", (n_obs,), self.depths.shape)
        if np.any(~(self.depths > 0)):
            raise ValueError("depths must be strictly positive")
        self.mean_covariates = _as_matrix(self.mean_covariates, n_obs, "mean_covariates")
        self.subject_of = np.asarray(self.subject_of, dtype=np.int64).reshape(-1)
        if self.subject_of.shape != (n_obs,):
            raise DimensionError("subject_of", (n_obs,), self.subject_of.shape)
        n_subj = int(self.subject_of.max()) + 1
        if self.subject_of.min() < 0 or np.unique(self.subject_of).size != n_subj:
            raise ValueError("subjects must be labelled contiguously 0..n-1")
        self.disp_covariates = _as_matrix(self.disp_covariates, n_subj, "disp_covariates")
        if self.zi_covariates is not None:
            self.zi_covariates = _as_matrix(self.zi_covariates, n_obs, "zi_covariates")
        if self.size_factors is not None:
            self.size_factors = np.asarray(self.size_factors, dtype=float).reshape(-1)
            if self.size_factors.shape != (n_obs,) or np.any(~(self.size_factors > 0)):
                raise ValueError("size_factors must be positive, one per observation")
        if np.any(self.counts > self.depths):
            warnings.warn(f"{self.name or 'dataset'}: some counts exceed their depth",
                          stacklevel=2)

    @property
    def n_obs(self) -> int:
        return self.counts.size

    @property
    def n_subjects(self) -> int:
        return self.disp_covariates.shape[0]

    @property
    def zero_fraction(self) -> float:
        return float(np.mean(self.counts == 0))

    def offset(self, mode: str = "log-depth") -> np.ndarray:
        if mode == "log-depth":
            return np.log(self.depths)
        if mode == "none":
            return np.zeros(self.n_obs)
        if mode == "log-median-of-ratios":
            if self.size_factors is None:
                raise ValueError("log-median-of-ratios offset needs size_factors")
            return np.log(self.size_factors)
        raise ValueError(f"unknown offset mode {mode!r}")

    def take(self, rows) -> "LongitudinalDataset":
        """Sub- or re-sample observations, keeping the subject table."""
        rows = np.asarray(rows, dtype=np.int64)
        used = np.unique(self.subject_of[rows])
        remap = np.full(self.n_subjects, -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        return LongitudinalDataset(
            counts=self.counts[rows],
            depths=self.depths[rows],
            mean_covariates=self.mean_covariates[rows],
            disp_covariates=self.disp_covariates[used],
            subject_of=remap[self.subject_of[rows]],
            zi_covariates=None if self.zi_covariates is None else self.zi_covariates[rows],
            size_factors=None if self.size_factors is None else self.size_factors[rows],
            name=self.name,
        )

    def with_counts(self, counts) -> "LongitudinalDataset":
        return LongitudinalDataset(
            counts=counts, depths=self.depths, mean_covariates=self.mean_covariates,
            disp_covariates=self.disp_covariates, subject_of=self.subject_of,
            zi_covariates=self.zi_covariates, size_factors=self.size_factors,
            name=self.name, subject_ids=self.subject_ids,
        )


def _as_matrix(x, n_rows: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(n_rows, -1) if x.size else np.zeros((n_rows, 0))
    if x.ndim != 2 or x.shape[0] != n_rows:
        raise DimensionError(name, (n_rows, "d"), x.shape)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


class LinkedParams(NamedTuple):
    lam: np.ndarray
    theta: np.ndarray
    p: np.ndarray


class Design(NamedTuple):
    """Arrays in the layout the compiled kernels expect."""

    w: np.ndarray        # counts as float64
    lgw1: np.ndarray     # lgamma(w + 1)
    offset: np.ndarray
    xd: np.ndarray       # [1, X]   (N, d1 + 1)
    subj: np.ndarray
    xsd: np.ndarray      # [1, X*]  (n, d2 + 1)
    zd: np.ndarray       # [1, Z]   (N, d3 + 1)


def design_matrices(data: LongitudinalDataset, spec: ModelSpec) -> Design:
    n_obs = data.n_obs
    if data.mean_covariates.shape[1] != spec.d1:
        raise DimensionError("mean_covariates", (n_obs, spec.d1), data.mean_covariates.shape)
    if data.disp_covariates.shape[1] != spec.d2:
        raise DimensionError("disp_covariates", (data.n_subjects, spec.d2),
                             data.disp_covariates.shape)
    ones = np.ones((n_obs, 1))
    if spec.variant == "zipg-full":
        if data.zi_covariates is None:
            raise DimensionError("zi_covariates", (n_obs, spec.d3), None)
        if data.zi_covariates.shape[1] != spec.d3:
            raise DimensionError("zi_covariates", (n_obs, spec.d3), data.zi_covariates.shape)
        zd = np.hstack([ones, data.zi_covariates])
    else:
        zd = ones
    w = data.counts.astype(np.float64)
    return Design(
        w=w,
        lgw1=gammaln(w + 1.0),
        offset=np.ascontiguousarray(data.offset(spec.offset_mode)),
        xd=np.ascontiguousarray(np.hstack([ones, data.mean_covariates])),
        subj=np.ascontiguousarray(data.subject_of),
        xsd=np.ascontiguousarray(np.hstack([np.ones((data.n_subjects, 1)),
                                            data.disp_covariates])),
        zd=np.ascontiguousarray(zd),
    )


def as_omega(omega, spec: ModelSpec) -> np.ndarray:
    arr = np.asarray(omega, dtype=float).reshape(-1)
    if arr.shape != (spec.n_params,):
        raise DimensionError("omega", (spec.n_params,), arr.shape)
    return arr


def linear_predictors(omega: np.ndarray, design: Design, spec: ModelSpec):
    """Return (log lambda per obs, log theta per subject, gamma per obs)."""
    eta = design.xd @ omega[spec.beta_slice] + design.offset
    eta_s = design.xsd @ omega[spec.beta_star_slice]
    gam = design.zd @ omega[spec.gamma_slice]
    return eta, eta_s, gam


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def logistic(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def gamma_of_p(p):
    """Logit of the zero-inflation probability."""
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("p must lie strictly inside (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def link_params(omega, data: LongitudinalDataset, spec: ModelSpec) -> LinkedParams:
    """Map unconstrained parameters to (lambda, theta, p)."""
    omega = as_omega(omega, spec)
    design = design_matrices(data, spec)
    eta, eta_s, gam = linear_predictors(omega, design, spec)
    p = logistic(gam)
    if spec.variant == "zipg":
        p = np.asarray(p).reshape(-1)[:1]
    return LinkedParams(np.exp(eta), np.exp(eta_s), np.asarray(p))


def log_pg_pmf(w, lam, theta, poisson_floor: float = POISSON_FLOOR):
    """Log probability mass of the Poisson-Gamma law.

    Broadcasts over its arguments.  ``theta`` below ``POISSON_FLOOR`` falls
    back to the Poisson log-pmf with mean ``lam``.
    """
    w = np.asarray(w, dtype=float)
    lam = np.asarray(lam, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(w < 0) or np.any(w != np.floor(w)):
        raise ValueError("w must be a nonnegative integer")
    if np.any(~(lam > 0)) or np.any(~(theta > 0)):
        raise ValueError("lambda and theta must be positive")
    out = _log_pg_ufunc(w, np.log(lam), np.log(theta), poisson_floor)
    return out if np.ndim(out) else float(out)


def pg_moments(lam, theta):
    """Mean and variance of the Poisson-Gamma law."""
    lam = np.asarray(lam, dtype=float)
    theta = np.asarray(theta, dtype=float)
    mean = lam
    var = lam * (1.0 + lam * theta)
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var
