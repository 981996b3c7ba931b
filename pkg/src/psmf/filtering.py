"""Sequential factorization filter: Y ~ C X column by column.

Each incoming column y_k triggers one prediction of the coefficient state and
two conditionally independent updates that both read the step-(k-1)
posteriors:

  dictionary   rank-one mean/covariance update driven by the predictive
               residual, with the observation noise collapsed to the scalar
               eta_k = tr(R + C P_bar C^T)/d, the constant-diagonal Gaussian
               closest in KL to the exact marginal
  coefficient  a Kalman-style correction with the dictionary uncertainty
               folded into the effective observation noise
               R_eff = R + (mu_bar^T V mu_bar) I

Missing entries are handled by restricting every observation-space quantity
to the observed rows. The dictionary covariance update deliberately keeps the
unmasked form on masked steps; this is an approximation (the exact masked
update would differ per row block) and is the documented behavior. A step
with no observed entries is pure propagation: the dictionary is returned
untouched and the coefficient posterior equals the prediction.
"""

from __future__ import annotations

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
from .errors import ContractError, DivergenceError, NumericalError
from .subspace import SubspaceModel, eval_f, jacobian_f

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FilterState:
    """Joint posterior after k processed columns."""

    dictionary: DictionaryPosterior
    coef: CoefficientPosterior
    noise: NoiseConfig
    k: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ContractError("step index must be non-negative")
        if self.dictionary.d != self.noise.d:
            raise ContractError("dictionary and noise config disagree on d")


def initial_state(noise: NoiseConfig) -> FilterState:
    return FilterState(
        dictionary=DictionaryPosterior(noise.C0, noise.V0),
        coef=CoefficientPosterior(noise.mu0, noise.P0),
        noise=noise,
        k=0,
    )


@dataclass(frozen=True)
class FilterTraceEntry:
    """Per-step diagnostics.

    nll_increment is the full negative log predictive density of the observed
    entries (constants included); predictive_mean / predictive_var cover all d
    rows so masked entries can be imputed. The robust filter also fills
    omega, phi and lam.
    """

    k: int
    eta: float
    innovation_norm: float
    nll_increment: float
    predictive_mean: Array
    predictive_var: Array
    observed_count: int
    omega: float | None = None
    phi: float | None = None
    lam: float | None = None


def predict(state: FilterState, model: SubspaceModel,
            Q: Array | None = None) -> tuple[Array, Array, Array]:
    """One-step prediction of the coefficient posterior.

    Returns (mu_bar, P_bar, F) where F is the transition Jacobian at the
    previous posterior mean. Q defaults to the state's configured process
    noise; the robust filter passes its evolved Q explicitly. Zero Q and zero
    P are legitimate (deterministic subspace) and yield P_bar = 0.
    """
    if model.state_dim != state.coef.dim:
        raise ContractError("model state dimension does not match the filter state")
    k_next = state.k + 1
    mu_prev = state.coef.mean
    mu_bar = eval_f(model, mu_prev, k_next)
    if not np.all(np.isfinite(mu_bar)):
        raise DivergenceError(f"non-finite predictive mean at step {k_next}")
    F = jacobian_f(model, mu_prev, k_next)
    Q = state.noise.Q if Q is None else Q
    P_bar = symmetrize_spd(F @ state.coef.cov @ F.T + Q)
    return mu_bar, P_bar, F


def compute_eta(C_prev: Array, P_bar: Array, R: Array,
                mask: Array | None = None) -> float:
    """Scalar collapsed observation noise for the dictionary update.

    Unmasked: eta = tr(R + C P_bar C^T) / d. With a mask the traces run over
    observed rows only and the divisor is the observed count.
    """
    C_prev = np.asarray(C_prev, dtype=float)
    d = C_prev.shape[0]
    obs = observed_indices(mask, d)
    m = require_observations(obs)
    rows = C_prev[obs]
    quad = float(np.einsum("ij,jk,ik->", rows, P_bar, rows))
    noise = float(np.diag(R)[obs].sum())
    eta = (noise + quad) / m
    if eta <= 0 or not np.isfinite(eta):
        raise NumericalError(f"collapsed noise eta = {eta} is not positive")
    return eta


def update_dictionary(dictionary: DictionaryPosterior, mu_bar: Array, y: Array,
                      eta: float, mask: Array | None = None) -> DictionaryPosterior:
    """Rank-one dictionary update from the predictive residual.

    mu_bar is the predictive feature vector (already projected for models
    whose observation reads H x). Masked rows of the mean are left untouched;
    the column covariance uses the unmasked formula (documented approximation).
    """
    C = dictionary.mean
    V = dictionary.col_cov
    mu_bar = np.asarray(mu_bar, dtype=float)
    if mu_bar.shape != (dictionary.rank,):
        raise ContractError("mu_bar does not match the dictionary rank")
    Vmu = V @ mu_bar
    denom = float(mu_bar @ Vmu) + eta
    if denom <= 0 or not np.isfinite(denom):
        raise NumericalError(f"dictionary update denominator {denom} not positive")
    V_new = symmetrize_spd(V - np.outer(Vmu, Vmu) / denom)
    obs = observed_indices(mask, dictionary.d)
    require_observations(obs)
    if mask is None:
        resid = y - C @ mu_bar
        C_new = C + np.outer(resid, Vmu) / denom
    else:
        resid = y[obs] - C[obs] @ mu_bar
        C_new = C.copy()
        C_new[obs] += np.outer(resid, Vmu) / denom
    if not np.all(np.isfinite(C_new)):
        raise DivergenceError("dictionary mean diverged")
    return DictionaryPosterior(C_new, V_new)


def _effective_observation(dictionary: DictionaryPosterior, mu_bar: Array,
                           obs_matrix: Array | None) -> tuple[Array, Array]:
    """Observation matrix on the state and the predictive feature vector."""
    if obs_matrix is None:
        return dictionary.mean, np.asarray(mu_bar, dtype=float)
    return dictionary.mean @ obs_matrix, obs_matrix @ mu_bar


def update_coefficients(dict_prev: DictionaryPosterior, mu_bar: Array,
                        P_bar: Array, y: Array, R: Array,
                        mask: Array | None = None,
                        obs_matrix: Array | None = None,
                        r_diagonal: bool | None = None) -> CoefficientPosterior:
    """Kalman-style coefficient update with dictionary uncertainty folded in.

    The innovation covariance is S = C P_bar C^T + R + (feat^T V feat) I over
    the observed rows, where feat is the predictive feature vector. When R is
    diagonal the solve goes through the low-rank identity (one r x r inner
    system); a dense solve is the fallback for full R.
    """
    mu_bar = np.asarray(mu_bar, dtype=float)
    y = np.asarray(y, dtype=float)
    R = np.asarray(R, dtype=float)
    d = dict_prev.d
    obs = observed_indices(mask, d)
    require_observations(obs)
    C_eff, feat = _effective_observation(dict_prev, mu_bar, obs_matrix)
    rho_v = float(feat @ dict_prev.col_cov @ feat)
    if r_diagonal is None:
        r_diagonal = bool(np.count_nonzero(R - np.diag(np.diag(R))) == 0)

    C_o = C_eff[obs]
    resid = y[obs] - C_o @ mu_bar
    CP = C_o @ P_bar            # (m, s)
    if r_diagonal:
        r_diag = np.diag(R)[obs] + rho_v
        sol = woodbury_solve(C_o, P_bar, r_diag, np.column_stack([resid, CP]))
    else:
        m = C_o.shape[0]
        S = C_o @ CP.T + R[np.ix_(obs, obs)] + rho_v * np.eye(m)
        sol = solve_spd(S, np.column_stack([resid, CP]), name="innovation covariance")
    gain_resid = sol[:, 0]
    gain_CP = sol[:, 1:]
    mu_new = mu_bar + CP.T @ gain_resid
    P_new = symmetrize_spd(P_bar - CP.T @ gain_CP)
    if not np.all(np.isfinite(mu_new)):
        raise DivergenceError("coefficient mean diverged")
    return CoefficientPosterior(mu_new, P_new)


def _predictive_moments(dict_prev: DictionaryPosterior, mu_bar: Array,
                        P_bar: Array, R: Array,
                        obs_matrix: Array | None) -> tuple[Array, Array, float]:
    """Full-row predictive mean and variance diag(C P_bar C^T + R_eff)."""
    C_eff, feat = _effective_observation(dict_prev, mu_bar, obs_matrix)
    rho_v = float(feat @ dict_prev.col_cov @ feat)
    yhat = C_eff @ mu_bar
    yvar = np.einsum("ij,jk,ik->i", C_eff, P_bar, C_eff) + np.diag(R) + rho_v
    return yhat, yvar, rho_v


def gaussian_nll_increment(resid_obs: Array, rho: float) -> float:
    """Negative log density of the observed residual under the collapsed
    predictive N(0, rho I), constants included."""
    m = resid_obs.shape[0]
    return 0.5 * (m * (LOG_TWO_PI + math.log(rho))
                  + float(resid_obs @ resid_obs) / rho)


def filter_step(state: FilterState, model: SubspaceModel, y: Array,
                mask: Array | None = None) -> tuple[FilterState, FilterTraceEntry]:
    """Process one column: predict, then the two independent updates.

    Both updates consume the step-(k-1) dictionary; neither sees the other's
    output. An all-missing column propagates the prediction and leaves the
    dictionary object untouched.
    """
    mu_bar, P_bar, _ = predict(state, model)
    noise = state.noise
    H = model.obs_matrix
    obs = observed_indices(mask, noise.d)
    m = int(obs.sum())
    yhat, yvar, rho_v = _predictive_moments(
        state.dictionary, mu_bar, P_bar, noise.R, H)

    if m == 0:
        new_state = FilterState(state.dictionary,
                                CoefficientPosterior(mu_bar, P_bar),
                                noise, state.k + 1)
        entry = FilterTraceEntry(state.k + 1, float("nan"), 0.0, 0.0,
                                 yhat, yvar, 0)
        return new_state, entry

    C_eff, feat = _effective_observation(state.dictionary, mu_bar, H)
    eta = compute_eta(C_eff, P_bar, noise.R, mask)
    resid_obs = y[obs] - yhat[obs]
    nll = gaussian_nll_increment(resid_obs, rho_v + eta)

    new_dict = update_dictionary(state.dictionary, feat, y, eta, mask)
    new_coef = update_coefficients(state.dictionary, mu_bar, P_bar, y, noise.R,
                                   mask, H, noise.r_diagonal)
    new_state = FilterState(new_dict, new_coef, noise, state.k + 1)
    entry = FilterTraceEntry(state.k + 1, eta, float(np.linalg.norm(resid_obs)),
                             nll, yhat, yvar, m)
    return new_state, entry


def reconstruct_and_impute(state: FilterState, model: SubspaceModel, y: Array,
                           mask: Array | None = None) -> tuple[Array, Array]:
    """Predictive reconstruction for the next column, before any update.

    Returns (yhat, yvar). Observed entries pass through y; missing entries
    carry the model's prediction. yvar is the diagonal of the full innovation
    covariance C P_bar C^T + R + (feat^T V feat) I for every row.
    """
    mu_bar, P_bar, _ = predict(state, model)
    yhat, yvar, _ = _predictive_moments(
        state.dictionary, mu_bar, P_bar, state.noise.R, model.obs_matrix)
    obs = observed_indices(mask, state.noise.d)
    out = yhat.copy()
    if y is not None:
        out[obs] = np.asarray(y, dtype=float)[obs]
    return out, yvar


@dataclass
class FilterRun:
    """Outcome of filtering a full data matrix."""

    state: FilterState
    entries: list[FilterTraceEntry]
    coef_means: Array        # (out_dim, n) posterior feature means
    predictive_mean: Array   # (d, n)
    predictive_var: Array    # (d, n)

    @property
    def total_nll(self) -> float:
        return float(sum(e.nll_increment for e in self.entries))


def run_filter(state: FilterState, model: SubspaceModel,
               data: DataMatrix) -> FilterRun:
    """Filter every column of `data` in order."""
    H = model.obs_matrix
    out_dim = model.out_dim
    X = np.empty((out_dim, data.n))
    Yhat = np.empty((data.d, data.n))
    Yvar = np.empty((data.d, data.n))
    entries: list[FilterTraceEntry] = []
    for j, (y, mask_col) in enumerate(data.columns()):
        state, entry = filter_step(state, model, y, mask_col)
        entries.append(entry)
        mu = state.coef.mean
        X[:, j] = mu if H is None else H @ mu
        Yhat[:, j] = entry.predictive_mean
        Yvar[:, j] = entry.predictive_var
    return FilterRun(state, entries, X, Yhat, Yvar)


def forecast(state: FilterState, model: SubspaceModel,
             steps: int) -> tuple[Array, Array]:
    """Roll the prediction forward with no updates.

    Returns (Yhat, Yvar), both (d, steps). The dictionary posterior is frozen
    at its final value; coefficient uncertainty accumulates through the
    transition Jacobian and Q.
    """
    if steps < 0:
        raise ContractError("steps must be non-negative")
    d = state.noise.d
    Yhat = np.empty((d, steps))
    Yvar = np.empty((d, steps))
    coef = state.coef
    k = state.k
    for j in range(steps):
        roll = FilterState(state.dictionary, coef, state.noise, k)
        mu_bar, P_bar, _ = predict(roll, model)
        yhat, yvar, _ = _predictive_moments(
            state.dictionary, mu_bar, P_bar, state.noise.R, model.obs_matrix)
        Yhat[:, j] = yhat
        Yvar[:, j] = yvar
        coef = CoefficientPosterior(mu_bar, P_bar)
        k += 1
    return Yhat, Yvar
