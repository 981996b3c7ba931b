"""Heavy-tailed variant of the factorization filter.

The observation noise is Student-t instead of Gaussian. Written as a scale
mixture, the exact conditional updates keep the Gaussian filter's mean
algebra and multiply the two covariance updates by data-driven factors:

  omega = (lam + r^T S^{-1} r) / (lam + m)   coefficient covariance
  phi   = (lam + ||r||^2 / rho) / (lam + m)  dictionary column covariance

with r the predictive residual over the m observed rows, S the innovation
covariance and rho = feat^T V feat + eta. The same omega rescales the noise
covariances for the next step (Q <- omega Q, R <- omega R), and the degrees
of freedom advance by the number of observed entries: lam <- lam + m.

A large residual (an outlier) inflates omega, which widens the posterior and
the noise for exactly one step; clean data drives the factors below one and
the filter tightens again.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    Array,
    CoefficientPosterior,
    DataMatrix,
    DictionaryPosterior,
    NoiseConfig,
    observed_indices,
    require_observations,
    solve_spd,
    symmetrize_spd,
    woodbury_solve,
)
from .errors import ContractError, NumericalError
from .filtering import (
    FilterRun,
    FilterState,
    FilterTraceEntry,
    _effective_observation,
    _predictive_moments,
    compute_eta,
    predict,
    update_coefficients,
    update_dictionary,
)
from .subspace import SubspaceModel

logger = logging.getLogger(__name__)

# Guard rails on the covariance scale factors; hitting them is logged.
SCALE_MIN = 1e-8
SCALE_MAX = 1e8


@dataclass(frozen=True)
class RobustState:
    """Filter state plus the Student-t bookkeeping.

    Q_current and R_current are the evolved noise covariances (they shrink or
    grow with omega each step); lam is the current degrees of freedom and
    lam0 the value it started from.
    """

    base: FilterState
    lam: float
    lam0: float
    Q_current: Array
    R_current: Array

    def __post_init__(self):
        if self.lam <= 0 or self.lam0 <= 0:
            raise ContractError("degrees of freedom must be positive")


def robust_initial_state(noise: NoiseConfig, lam0: float) -> RobustState:
    from .filtering import initial_state

    return RobustState(initial_state(noise), float(lam0), float(lam0),
                       noise.Q, noise.R)


def _clamped(value: float, label: str, k: int) -> float:
    if not np.isfinite(value) or value <= 0:
        raise NumericalError(f"{label} = {value} at step {k} is not positive")
    if value < SCALE_MIN or value > SCALE_MAX:
        clamped = min(max(value, SCALE_MIN), SCALE_MAX)
        logger.warning("step %d: %s = %.3e clamped to %.3e", k, label, value, clamped)
        return clamped
    return value


def _scale_from_delta2(delta2: float, lam: float, m: int) -> float:
    return (lam + delta2) / (lam + m)


def coefficient_scale_factor(y: Array, C_prev: Array, mu_bar: Array, S: Array,
                             lam: float) -> float:
    """Covariance factor omega from the squared Mahalanobis residual.

    y, C_prev and S must already be restricted to the observed rows; the
    divisor uses their dimension.
    """
    y = np.asarray(y, dtype=float)
    resid = y - np.asarray(C_prev, dtype=float) @ np.asarray(mu_bar, dtype=float)
    delta2 = float(resid @ solve_spd(S, resid, name="innovation covariance"))
    return _scale_from_delta2(delta2, lam, y.shape[0])


def dictionary_scale_factor(y: Array, C_prev: Array, mu_bar: Array,
                            V_prev: Array, eta: float, lam: float) -> float:
    """Covariance factor phi from the collapsed-noise residual."""
    y = np.asarray(y, dtype=float)
    mu_bar = np.asarray(mu_bar, dtype=float)
    resid = y - np.asarray(C_prev, dtype=float) @ mu_bar
    rho = float(mu_bar @ np.asarray(V_prev, dtype=float) @ mu_bar) + eta
    if rho <= 0 or not np.isfinite(rho):
        raise NumericalError(f"collapsed predictive variance {rho} not positive")
    delta2 = float(resid @ resid) / rho
    return _scale_from_delta2(delta2, lam, y.shape[0])


def student_t_nll_increment(resid_obs: Array, rho: float, lam: float) -> float:
    """Negative log density of the observed residual under the collapsed
    predictive Student-t with scale rho I and lam degrees of freedom."""
    m = resid_obs.shape[0]
    quad = float(resid_obs @ resid_obs) / rho
    return (math.lgamma(lam / 2.0) - math.lgamma((lam + m) / 2.0)
            + 0.5 * m * (math.log(lam) + math.log(math.pi) + math.log(rho))
            + 0.5 * (lam + m) * math.log1p(quad / lam))


def robust_filter_step(rstate: RobustState, model: SubspaceModel, y: Array,
                       mask: Array | None = None
                       ) -> tuple[RobustState, FilterTraceEntry]:
    """One heavy-tailed step.

    Mean updates are identical to the Gaussian filter run with the current
    Q/R; omega and phi scale the coefficient and dictionary covariances, the
    noise covariances evolve by omega, and lam advances by the observed
    count. An all-missing column is pure propagation: nothing is scaled and
    lam stays put.
    """
    base = rstate.base
    noise = base.noise
    lam = rstate.lam
    Q_cur, R_cur = rstate.Q_current, rstate.R_current
    k_next = base.k + 1

    mu_bar, P_bar, _ = predict(base, model, Q=Q_cur)
    H = model.obs_matrix
    obs = observed_indices(mask, noise.d)
    m = int(obs.sum())
    yhat, yvar, rho_v = _predictive_moments(base.dictionary, mu_bar, P_bar,
                                            R_cur, H)

    if m == 0:
        new_base = FilterState(base.dictionary,
                               CoefficientPosterior(mu_bar, P_bar),
                               noise, k_next)
        entry = FilterTraceEntry(k_next, float("nan"), 0.0, 0.0, yhat, yvar, 0,
                                 omega=float("nan"), phi=float("nan"), lam=lam)
        return RobustState(new_base, lam, rstate.lam0, Q_cur, R_cur), entry

    C_eff, feat = _effective_observation(base.dictionary, mu_bar, H)
    eta = compute_eta(C_eff, P_bar, R_cur, mask)
    resid_obs = y[obs] - yhat[obs]
    rho = rho_v + eta

    phi = _clamped(_scale_from_delta2(float(resid_obs @ resid_obs) / rho, lam, m),
                   "phi", k_next)

    C_o = C_eff[obs]
    if noise.r_diagonal:
        r_diag = np.diag(R_cur)[obs] + rho_v
        delta2 = float(resid_obs @ woodbury_solve(C_o, P_bar, r_diag, resid_obs))
    else:
        S = C_o @ P_bar @ C_o.T + R_cur[np.ix_(obs, obs)] + rho_v * np.eye(m)
        delta2 = float(resid_obs @ solve_spd(S, resid_obs,
                                             name="innovation covariance"))
    omega = _clamped(_scale_from_delta2(delta2, lam, m), "omega", k_next)

    nll = student_t_nll_increment(resid_obs, rho, lam)

    gauss_dict = update_dictionary(base.dictionary, feat, y, eta, mask)
    new_dict = DictionaryPosterior(gauss_dict.mean,
                                   symmetrize_spd(phi * gauss_dict.col_cov))
    gauss_coef = update_coefficients(base.dictionary, mu_bar, P_bar, y, R_cur,
                                     mask, H, noise.r_diagonal)
    new_coef = CoefficientPosterior(gauss_coef.mean,
                                    symmetrize_spd(omega * gauss_coef.cov))

    lam_next = lam + m
    new_base = FilterState(new_dict, new_coef, noise, k_next)
    new_rstate = RobustState(new_base, lam_next, rstate.lam0,
                             symmetrize_spd(omega * Q_cur),
                             symmetrize_spd(omega * R_cur))
    entry = FilterTraceEntry(k_next, eta, float(np.linalg.norm(resid_obs)),
                             nll, yhat, yvar, m,
                             omega=omega, phi=phi, lam=lam_next)
    return new_rstate, entry


def run_robust_filter(rstate: RobustState, model: SubspaceModel,
                      data: DataMatrix) -> tuple[RobustState, FilterRun]:
    """Filter every column of `data` with the heavy-tailed step."""
    H = model.obs_matrix
    X = np.empty((model.out_dim, data.n))
    Yhat = np.empty((data.d, data.n))
    Yvar = np.empty((data.d, data.n))
    entries: list[FilterTraceEntry] = []
    for j, (y, mask_col) in enumerate(data.columns()):
        rstate, entry = robust_filter_step(rstate, model, y, mask_col)
        entries.append(entry)
        mu = rstate.base.coef.mean
        X[:, j] = mu if H is None else H @ mu
        Yhat[:, j] = entry.predictive_mean
        Yvar[:, j] = entry.predictive_var
    run = FilterRun(rstate.base, entries, X, Yhat, Yvar)
    return rstate, run
