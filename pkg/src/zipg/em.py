"""EM fitting of the ZIPG model and its covariate-linked zero-inflation variant."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy.linalg import null_space

from .likelihood import (
    _complete_value_grad,
    _observed_terms,
    _responsibilities,
    information_criteria,
)
from .model import (
    POISSON_FLOOR,
    Design,
    LongitudinalDataset,
    ModelSpec,
    ParamVector,
    design_matrices,
    gamma_of_p,
)
from .optimizer import NONFINITE_START, bfgs_jit

__all__ = [
    "FitSettings",
    "FitResult",
    "FitError",
    "Restriction",
    "initialize",
    "fit",
    "fit_full",
]

log = logging.getLogger(__name__)

# method-of-moments dispersion is clipped here at initialization; starting at
# the Poisson floor itself would leave the dispersion gradient ~0
INIT_THETA_MIN = 1e-2
INIT_THETA_MAX = 1e3

STATUS_OK = 0
STATUS_NONFINITE = 1


class FitError(RuntimeError):
    pass


@dataclass
class FitSettings:
    t_max: int = 100
    eps_tol: float = 1e-8
    gtol: float = 1e-6
    ftol: float = 1e-10
    max_inner: int = 200
    init_iterations: int = 25
    poisson_floor: float = POISSON_FLOOR


@dataclass
class Restriction:
    """Affine parameterization ``omega = offset + basis @ u``."""

    offset: np.ndarray
    basis: np.ndarray

    @classmethod
    def identity(cls, k: int) -> "Restriction":
        return cls(np.zeros(k), np.eye(k))

    @classmethod
    def pin(cls, k: int, fixed: dict) -> "Restriction":
        """Hold the coordinates in ``fixed`` (index -> value) constant."""
        free = [j for j in range(k) if j not in fixed]
        offset = np.zeros(k)
        for j, v in fixed.items():
            offset[j] = v
        return cls(offset, np.eye(k)[:, free])

    @classmethod
    def linear(cls, a_matrix, b, base: Optional["Restriction"] = None) -> "Restriction":
        """Restrict to ``A omega = b`` via the null space of ``A``."""
        a_matrix = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if base is not None:
            # compose with an existing restriction: A (c + T u) = b
            a_eff = a_matrix @ base.basis
            b_eff = b - a_matrix @ base.offset
            u0 = np.linalg.lstsq(a_eff, b_eff, rcond=None)[0]
            ns = null_space(a_eff)
            return cls(base.offset + base.basis @ u0, base.basis @ ns)
        c = np.linalg.lstsq(a_matrix, b, rcond=None)[0]
        return cls(c, null_space(a_matrix))

    def to_free(self, omega: np.ndarray) -> np.ndarray:
        return self.basis.T @ (omega - self.offset)

    def to_omega(self, u: np.ndarray) -> np.ndarray:
        return self.offset + self.basis @ u


@dataclass
class FitResult:
    omega_hat: ParamVector
    loglik: float
    loglik_trace: np.ndarray
    responsibilities: np.ndarray
    n_em_iterations: int
    converged: bool
    bic: float
    aic: float
    spec: ModelSpec = field(repr=False, default=None)

    @property
    def params(self) -> np.ndarray:
        return self.omega_hat.to_array()

    def as_dict(self) -> dict:
        names = self.spec.param_names() if self.spec else None
        return {
            "params": dict(zip(names, self.params.tolist())) if names else self.params.tolist(),
            "loglik": self.loglik,
            "bic": self.bic,
            "aic": self.aic,
            "n_em_iterations": self.n_em_iterations,
            "converged": self.converged,
        }


# ---------------------------------------------------------------------------
# compiled EM loop
# ---------------------------------------------------------------------------

@numba.njit(nogil=True)
def _neg_complete(u, c, basis, w, lgw1, offset, xd, subj, xsd, zd, z, floor):
    omega = c + basis @ u
    val, grad, _ = _complete_value_grad(omega, w, lgw1, offset, xd, subj, xsd, zd, z, floor)
    return -val, -(basis.T @ grad)


@numba.njit(nogil=True)
def _em_loop(u0, c, basis, w, lgw1, offset, xd, subj, xsd, zd, floor,
             t_max, eps_tol, gtol, ftol, max_inner):
    u = u0.copy()
    omega = c + basis @ u
    z = _responsibilities(omega, w, offset, xd, subj, xsd, zd, floor)
    trace = np.empty(t_max + 1)
    trace[0] = np.sum(_observed_terms(omega, w, lgw1, offset, xd, subj, xsd, zd, floor))
    l_prev, _, _ = _complete_value_grad(omega, w, lgw1, offset, xd, subj, xsd, zd, z, floor)
    h = np.zeros((u.shape[0], u.shape[0]))
    converged = False
    status = 0
    t = 0
    if not (math.isfinite(trace[0]) and math.isfinite(l_prev)):
        return u, z, trace[:1], 0, False, 1
    while t < t_max:
        args = (c, basis, w, lgw1, offset, xd, subj, xsd, zd, z, floor)
        u, f, _, h, _, st = bfgs_jit(_neg_complete, u, args, h, gtol, ftol, max_inner,
                                     1e-4, 0.9, None)
        t += 1
        if st == NONFINITE_START:
            status = 1
            break
        l_new = -f
        omega = c + basis @ u
        z = _responsibilities(omega, w, offset, xd, subj, xsd, zd, floor)
        trace[t] = np.sum(_observed_terms(omega, w, lgw1, offset, xd, subj, xsd, zd, floor))
        if not math.isfinite(trace[t]):
            status = 1
            break
        if abs(l_new - l_prev) <= eps_tol * abs(l_prev):
            converged = True
            break
        l_prev = l_new
    return u, z, trace[:t + 1], t, converged, status


def run_em(design: Design, start: np.ndarray, restriction: Restriction,
           settings: FitSettings, t_max: Optional[int] = None, eps_tol: Optional[float] = None):
    u0 = restriction.to_free(start)
    return _em_loop(
        np.ascontiguousarray(u0), np.ascontiguousarray(restriction.offset),
        np.ascontiguousarray(restriction.basis), design.w, design.lgw1, design.offset,
        design.xd, design.subj, design.xsd, design.zd, settings.poisson_floor,
        settings.t_max if t_max is None else t_max,
        settings.eps_tol if eps_tol is None else eps_tol,
        settings.gtol, settings.ftol, settings.max_inner)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _zero_proportion(data: LongitudinalDataset) -> float:
    n = data.n_obs
    p = data.zero_fraction
    return min(max(p, 1.0 / (2 * n)), 1.0 - 1.0 / (2 * n))


def initialize(data: LongitudinalDataset, spec: ModelSpec,
               settings: Optional[FitSettings] = None,
               restriction: Optional[Restriction] = None) -> ParamVector:
    """Starting values: ZIP fit, observed-zero gamma, moment dispersion."""
    settings = settings or FitSettings()
    if np.all(data.counts == 0):
        raise FitError(f"degenerate taxon {data.name!r}: all counts are zero")
    design = design_matrices(data, spec)
    k = spec.n_params
    bs = spec.beta_star_slice
    gs = spec.gamma_slice
    p0 = _zero_proportion(data)

    # stage 1: zero-inflated Poisson, dispersion pinned below the Poisson floor
    start = np.zeros(k)
    start[0] = math.log(np.mean(data.counts)) - math.log(np.mean(np.exp(design.offset)))
    start[gs.start] = gamma_of_p(p0)
    start[bs.start] = math.log(settings.poisson_floor) - 1.0
    fixed = {j: start[j] for j in range(bs.start, bs.stop)}
    if restriction is not None:
        fixed.update(_pinned_coordinates(restriction, k))
        for j, v in fixed.items():
            start[j] = v
    zip_restr = Restriction.pin(k, fixed)
    u, _, _, _, _, status = run_em(design, start, zip_restr, settings,
                                   t_max=settings.init_iterations, eps_tol=1e-12)
    omega = zip_restr.to_omega(u) if status == STATUS_OK else start

    # stage 2: zero-inflation from the observed zero proportion
    p_zip = 1.0 / (1.0 + math.exp(-omega[gs.start]))
    omega[gs] = 0.0
    omega[gs.start] = gamma_of_p(p0)

    # stage 3: moment estimate of the dispersion under the ZIP mean
    lam = np.exp(design.xd @ omega[spec.beta_slice] + design.offset)
    w = data.counts.astype(float)
    q = 1.0 - p_zip
    num = np.sum(w * w - q * lam - q * lam * lam)
    den = np.sum(q * lam * lam)
    theta = num / den if den > 0 else INIT_THETA_MIN
    theta = min(max(theta, INIT_THETA_MIN), INIT_THETA_MAX)
    omega[bs] = 0.0
    omega[bs.start] = math.log(theta)
    if restriction is not None:
        omega = restriction.to_omega(restriction.to_free(omega))
    return ParamVector.from_array(omega, spec)


def _pinned_coordinates(restriction: Restriction, k: int) -> dict:
    # coordinates the restriction holds fixed (zero rows of the basis)
    out = {}
    for j in range(k):
        if np.all(restriction.basis[j] == 0.0):
            out[j] = float(restriction.offset[j])
    return out


def _constant_disp_columns(data: LongitudinalDataset) -> list[int]:
    x = data.disp_covariates
    if x.shape[1] == 0:
        return []
    return [j for j in range(x.shape[1]) if np.ptp(x[:, j]) == 0.0]


def fit(data: LongitudinalDataset, spec: ModelSpec, settings: Optional[FitSettings] = None,
        start=None, restriction: Optional[Restriction] = None) -> FitResult:
    """Maximum-likelihood fit by EM.

    ``start`` skips initialization (warm start).  ``restriction`` constrains
    the parameters to an affine subspace, e.g. for null-hypothesis fits.
    """
    settings = settings or FitSettings()
    design = design_matrices(data, spec)
    k = spec.n_params

    dropped = _constant_disp_columns(data)
    if dropped:
        warnings.warn(f"{data.name or 'dataset'}: dispersion covariate columns {dropped} "
                      "have zero variance; their coefficients are held at 0", stacklevel=2)
        pins = {spec.beta_star_slice.start + 1 + j: 0.0 for j in dropped}
        base = restriction or Restriction.identity(k)
        a = np.zeros((len(pins), k))
        for r, j in enumerate(pins):
            a[r, j] = 1.0
        restriction = Restriction.linear(a, np.zeros(len(pins)), base=base)
    restriction = restriction or Restriction.identity(k)

    if start is None:
        omega0 = initialize(data, spec, settings, restriction).to_array()
    else:
        omega0 = np.asarray(start, dtype=float).reshape(-1)
        if omega0.shape != (k,):
            raise FitError(f"start has length {omega0.size}, expected {k}")
    omega0 = restriction.to_omega(restriction.to_free(omega0))

    u, z, trace, n_iter, converged, status = run_em(design, omega0, restriction, settings)
    if status != STATUS_OK:
        raise FitError(f"non-finite likelihood at EM iteration {n_iter}")
    omega = restriction.to_omega(u)
    loglik = float(trace[-1])
    bic, aic = information_criteria(loglik, omega, data.n_obs)
    return FitResult(
        omega_hat=ParamVector.from_array(omega, spec),
        loglik=loglik,
        loglik_trace=np.asarray(trace),
        responsibilities=z,
        n_em_iterations=int(n_iter),
        converged=bool(converged),
        bic=bic,
        aic=aic,
        spec=spec,
    )


def fit_full(data: LongitudinalDataset, spec: Optional[ModelSpec] = None,
             settings: Optional[FitSettings] = None, start=None) -> FitResult:
    """Fit the variant whose zero-inflation probability depends on covariates."""
    if data.zi_covariates is None:
        raise FitError("zipg-full needs zi_covariates")
    if spec is None:
        spec = ModelSpec.for_data(data, variant="zipg-full")
    if spec.variant != "zipg-full":
        raise FitError("fit_full needs a zipg-full model spec")
    return fit(data, spec, settings, start=start)
