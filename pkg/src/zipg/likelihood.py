"""Observed and complete-data log-likelihoods, E-step, gradient, BIC/AIC."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .model import (
    POISSON_FLOOR,
    Design,
    LongitudinalDataset,
    ModelSpec,
    _digamma,
    _log_pg,
    _softplus,
    _sigmoid,
    as_omega,
    design_matrices,
)

__all__ = [
    "LikelihoodValue",
    "NonFiniteLikelihood",
    "observed_loglik",
    "complete_loglik",
    "e_step",
    "grad_complete_loglik",
    "information_criteria",
]


class NonFiniteLikelihood(FloatingPointError):
    def __init__(self, index: int, where: str = ""):
        self.index = index
        msg = f"non-finite log-likelihood at observation {index}"
        super().__init__(msg + (f" ({where})" if where else ""))


@dataclass
class LikelihoodValue:
    loglik: float
    per_observation: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# kernels; omega layout is [beta (d1+1), beta_star (d2+1), gamma (d3+1)]
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _predictors(omega, offset, xd, xsd, zd):
    k1 = xd.shape[1]
    k2 = xsd.shape[1]
    eta = xd @ omega[:k1] + offset
    eta_s = xsd @ omega[k1:k1 + k2]
    gam = zd @ omega[k1 + k2:]
    return eta, eta_s, gam


@numba.njit(cache=True, nogil=True)
def _observed_terms(omega, w, lgw1, offset, xd, subj, xsd, zd, floor):
    eta, eta_s, gam = _predictors(omega, offset, xd, xsd, zd)
    n = w.shape[0]
    out = np.empty(n)
    for k in range(n):
        lp = _log_pg(w[k], eta[k], eta_s[subj[k]], lgw1[k], floor)
        g = gam[k]
        if w[k] == 0.0:
            # log(e^g + P) - log(1 + e^g), via log-sum-exp
            m = max(g, lp)
            out[k] = m + math.log(math.exp(g - m) + math.exp(lp - m)) - _softplus(g)
        else:
            out[k] = lp - _softplus(g)
    return out


@numba.njit(cache=True, nogil=True)
def _responsibilities(omega, w, offset, xd, subj, xsd, zd, floor):
    eta, eta_s, gam = _predictors(omega, offset, xd, xsd, zd)
    n = w.shape[0]
    z = np.zeros(n)
    for k in range(n):
        if w[k] == 0.0:
            # p / (p + (1 - p) P(0)) = sigmoid(gamma - log P(0))
            z[k] = _sigmoid(gam[k] - _log_pg(0.0, eta[k], eta_s[subj[k]], 0.0, floor))
    return z


@numba.njit(cache=True, nogil=True)
def _complete_value_grad(omega, w, lgw1, offset, xd, subj, xsd, zd, z, floor):
    """Complete-data log-likelihood and its gradient in omega.

    Returns (value, gradient, index of first non-finite term or -1).
    """
    k1 = xd.shape[1]
    k2 = xsd.shape[1]
    k3 = zd.shape[1]
    eta, eta_s, gam = _predictors(omega, offset, xd, xsd, zd)
    n_subj = xsd.shape[0]
    # per-subject pieces of the PG term
    a_s = np.empty(n_subj)
    lga_s = np.empty(n_subj)
    dga_s = np.empty(n_subj)
    for i in range(n_subj):
        theta = math.exp(eta_s[i])
        if theta < floor:
            a_s[i] = -1.0
            lga_s[i] = 0.0
            dga_s[i] = 0.0
        else:
            a_s[i] = 1.0 / theta
            lga_s[i] = math.lgamma(a_s[i])
            dga_s[i] = _digamma(a_s[i])
    grad = np.zeros(omega.shape[0])
    d_subj = np.zeros(n_subj)
    total = 0.0
    bad = -1
    for k in range(w.shape[0]):
        i = subj[k]
        g = gam[k]
        zk = z[k]
        # softplus(g) and sigmoid(g) from a single exp
        eg = math.exp(-abs(g))
        sp_g = max(g, 0.0) + math.log1p(eg)
        p = 1.0 / (1.0 + eg) if g >= 0.0 else eg / (1.0 + eg)
        val = zk * (g - sp_g)
        if zk < 1.0:
            c = 1.0 - zk
            wk = w[k]
            a = a_s[i]
            if a < 0.0:
                lam = math.exp(eta[k])
                lp = wk * eta[k] - lam - lgw1[k]
                d_eta = wk - lam
                d_eta_s = 0.0
            else:
                x = eta[k] + eta_s[i]
                ex = math.exp(-abs(x))
                sp_x = max(x, 0.0) + math.log1p(ex)
                sig = 1.0 / (1.0 + ex) if x >= 0.0 else ex / (1.0 + ex)
                # -w softplus(-x) - a softplus(x), using softplus(-x) = softplus(x) - x
                lp = -wk * (sp_x - x) - a * sp_x - lgw1[k]
                d_eta = wk * (1.0 - sig) - a * sig
                d_eta_s = d_eta + a * sp_x
                if wk > 0.0:
                    lp += math.lgamma(wk + a) - lga_s[i]
                    if wk <= 8.0 or (wk < 64.0 and a > 1e4):
                        shift = 0.0
                        for m in range(int(wk)):
                            shift += 1.0 / (a + m)
                    else:
                        shift = _digamma(wk + a) - dga_s[i]
                    d_eta_s -= a * shift
            val += c * (lp - sp_g)
            for j in range(k1):
                grad[j] += c * d_eta * xd[k, j]
            d_subj[i] += c * d_eta_s
        if bad < 0 and not math.isfinite(val):
            bad = k
        total += val
        dg = zk - p
        for j in range(k3):
            grad[k1 + k2 + j] += dg * zd[k, j]
    for i in range(n_subj):
        for j in range(k2):
            grad[k1 + j] += d_subj[i] * xsd[i, j]
    return total, grad, bad


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _prepare(omega, data: LongitudinalDataset, spec: ModelSpec):
    return as_omega(omega, spec), design_matrices(data, spec)


def _check_z(z, n_obs: int) -> np.ndarray:
    z = np.ascontiguousarray(np.asarray(z, dtype=float).reshape(-1))
    if z.shape != (n_obs,):
        raise ValueError(f"responsibilities must have length {n_obs}")
    if np.any((z < 0) | (z > 1)):
        raise ValueError("responsibilities must lie in [0, 1]")
    return z


def observed_terms(omega: np.ndarray, d: Design, floor: float = POISSON_FLOOR) -> np.ndarray:
    return _observed_terms(omega, d.w, d.lgw1, d.offset, d.xd, d.subj, d.xsd, d.zd, floor)


def responsibilities(omega: np.ndarray, d: Design, floor: float = POISSON_FLOOR) -> np.ndarray:
    return _responsibilities(omega, d.w, d.offset, d.xd, d.subj, d.xsd, d.zd, floor)


def observed_loglik(omega, data: LongitudinalDataset, spec: ModelSpec,
                    per_observation: bool = False,
                    poisson_floor: float = POISSON_FLOOR) -> LikelihoodValue:
    """Log-likelihood of the observed counts under the mixture."""
    omega, design = _prepare(omega, data, spec)
    terms = observed_terms(omega, design, poisson_floor)
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise NonFiniteLikelihood(int(bad[0]), "observed")
    return LikelihoodValue(float(np.sum(terms)), terms if per_observation else None)


def complete_loglik(omega, data: LongitudinalDataset, z, spec: ModelSpec,
                    poisson_floor: float = POISSON_FLOOR) -> float:
    """Complete-data log-likelihood given responsibilities ``z``."""
    omega, d = _prepare(omega, data, spec)
    z = _check_z(z, data.n_obs)
    val, _, bad = _complete_value_grad(omega, d.w, d.lgw1, d.offset, d.xd, d.subj,
                                       d.xsd, d.zd, z, poisson_floor)
    if bad >= 0:
        raise NonFiniteLikelihood(int(bad), "complete")
    return float(val)


def grad_complete_loglik(omega, data: LongitudinalDataset, z, spec: ModelSpec,
                         poisson_floor: float = POISSON_FLOOR) -> np.ndarray:
    """Analytic gradient of the complete-data log-likelihood in omega."""
    omega, d = _prepare(omega, data, spec)
    z = _check_z(z, data.n_obs)
    _, grad, _ = _complete_value_grad(omega, d.w, d.lgw1, d.offset, d.xd, d.subj,
                                      d.xsd, d.zd, z, poisson_floor)
    return grad


def e_step(omega, data: LongitudinalDataset, spec: ModelSpec,
           poisson_floor: float = POISSON_FLOOR) -> np.ndarray:
    """Posterior probability that each observation is a structural zero."""
    omega, design = _prepare(omega, data, spec)
    return responsibilities(omega, design, poisson_floor)


def information_criteria(loglik: float, omega, n_obs: int) -> tuple[float, float]:
    """Return (BIC, AIC); the parameter count is the length of omega."""
    if n_obs < 1:
        raise ValueError("n_obs must be at least 1")
    k = len(np.asarray(omega).reshape(-1))
    bic = -2.0 * loglik + k * math.log(n_obs)
    aic = -2.0 * loglik + 2.0 * k
    return bic, aic
