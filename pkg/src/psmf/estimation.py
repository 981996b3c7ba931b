"""Transition-parameter estimation.

The per-step objective is the negative log of the approximate predictive
density with the dictionary marginalized and the observation noise collapsed
to the scalar eta:

  gaussian   (m/2) log rho + ||r||^2 / (2 rho)
  robust     (m/2) log rho + ((lam + m)/2) log(1 + ||r||^2 / (lam rho))

with rho = feat^T V feat + eta, feat = (H) f_theta(mu_prev), r the residual
over the m observed rows, and constants dropped. eta and V are treated as
constants of theta within a step: their dependence on theta through the
predicted covariance is deliberately not differentiated.

Gradients come in two flavors: central finite differences (the reference,
one-sided at a projection boundary) and an analytic chain-rule path through
the model's theta-Jacobian. Optimization is Adam as ascent on the summed log
predictive, with a projection onto the per-coordinate lower bounds after
every step. The iterative mode runs full filtering passes and takes one
optimizer step per pass, warm-starting the next pass from the final
posteriors; the recursive mode updates theta after every filter step in a
single pass.
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
)
from .errors import ContractError, NumericalError
from .filtering import FilterRun, FilterState, FilterTraceEntry, filter_step
from .robust import RobustState, robust_filter_step
from .subspace import SubspaceModel, eval_f, theta_jacobian

NLL_MODES = ("gaussian", "robust", "masked")

_FD_STEP = 1e-7


@dataclass(frozen=True)
class NllContext:
    """Frozen per-step inputs for the objective: everything except theta.

    dictionary and mu_prev are the step-(k-1) posteriors, eta the collapsed
    noise computed by the filter at step k. mode selects the objective
    family; mask (optional) restricts to observed rows in either family, and
    lam is required for the robust family.
    """

    model: SubspaceModel
    k: int
    dictionary: DictionaryPosterior
    mu_prev: Array
    y: Array
    eta: float
    mode: str = "gaussian"
    lam: float | None = None
    mask: Array | None = None

    def __post_init__(self):
        if self.mode not in NLL_MODES:
            raise ContractError(f"unknown objective mode '{self.mode}'")
        if self.mode == "robust" and self.lam is None:
            raise ContractError("robust objective requires lam")
        if self.eta <= 0 or not np.isfinite(self.eta):
            raise ContractError("eta must be positive and finite")


def _objective_pieces(theta: Array, ctx: NllContext):
    model = ctx.model.with_theta(theta)
    f = eval_f(model, ctx.mu_prev, ctx.k)
    H = model.obs_matrix
    feat = f if H is None else H @ f
    V = ctx.dictionary.col_cov
    rho = float(feat @ V @ feat) + ctx.eta
    if rho <= 0 or not np.isfinite(rho):
        raise NumericalError(f"collapsed predictive variance {rho} not positive")
    C_eff = ctx.dictionary.mean if H is None else ctx.dictionary.mean @ H
    obs = observed_indices(ctx.mask, ctx.dictionary.d)
    m = require_observations(obs)
    resid = np.asarray(ctx.y, dtype=float)[obs] - C_eff[obs] @ f
    return model, f, feat, V, C_eff[obs], obs, m, resid, rho


def nll_step(theta: Array, ctx: NllContext) -> float:
    """theta-dependent part of the step objective (constants dropped)."""
    _, _, _, _, _, _, m, resid, rho = _objective_pieces(theta, ctx)
    q = float(resid @ resid)
    if ctx.mode == "robust":
        lam = float(ctx.lam)
        return 0.5 * m * math.log(rho) + 0.5 * (lam + m) * math.log1p(q / (lam * rho))
    return 0.5 * (m * math.log(rho) + q / rho)


def _nll_gradient_fd(theta: Array, ctx: NllContext, step: float | None) -> Array:
    lb = ctx.model.lower_bounds
    g = np.empty(theta.shape[0])
    for i in range(theta.shape[0]):
        h = step if step is not None else max(_FD_STEP, _FD_STEP * abs(theta[i]))
        tp = theta.copy(); tp[i] += h
        if theta[i] - h < lb[i]:
            # one-sided at the projection boundary
            g[i] = (nll_step(tp, ctx) - nll_step(theta, ctx)) / h
        else:
            tm = theta.copy(); tm[i] -= h
            g[i] = (nll_step(tp, ctx) - nll_step(tm, ctx)) / (2.0 * h)
    return g


def _nll_gradient_analytic(theta: Array, ctx: NllContext) -> Array:
    """Chain rule: sensitivity of the objective to f, then the model's
    theta-Jacobian. The residual uses C_eff = C H which maps the state f
    directly, while rho depends on f only through feat = H f."""
    model, f, feat, V, C_o, _, m, resid, rho = _objective_pieces(theta, ctx)
    q = float(resid @ resid)
    Vfeat = V @ feat
    H = model.obs_matrix
    # dq/df = -2 C_o^T resid (C_o already includes H); drho/df = 2 H^T V feat
    dq_df = -2.0 * (C_o.T @ resid)
    drho_dfeat = 2.0 * Vfeat
    drho_df = drho_dfeat if H is None else H.T @ drho_dfeat
    if ctx.mode == "robust":
        lam = float(ctx.lam)
        T = 1.0 + q / (lam * rho)
        # d/df [ (m/2) log rho + ((lam+m)/2) log T ]
        dT_df = (dq_df * rho - q * drho_df) / (lam * rho * rho)
        d_state = 0.5 * m * drho_df / rho + 0.5 * (lam + m) * dT_df / T
    else:
        d_state = (0.5 * m * drho_df / rho
                   + 0.5 * (dq_df * rho - q * drho_df) / (rho * rho))
    J = theta_jacobian(model, ctx.mu_prev, ctx.k)
    return J.T @ d_state


def nll_gradient(theta: Array, ctx: NllContext, method: str = "fd",
                 step: float | None = None) -> Array:
    """Gradient of the step objective with respect to theta.

    method "fd" is the central-finite-difference reference with per-coordinate
    step max(1e-7, 1e-7 |theta_i|) unless `step` overrides it; "analytic"
    chains the closed-form feature sensitivity through the model's
    theta-Jacobian. eta and V are held fixed, matching the objective.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != ctx.model.theta.shape:
        raise ContractError("theta length does not match the model")
    if theta.shape[0] == 0:
        return np.zeros(0)
    if method == "fd":
        return _nll_gradient_fd(theta, ctx, step)
    if method == "analytic":
        return _nll_gradient_analytic(theta, ctx)
    raise ContractError(f"unknown gradient method '{method}'")


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings plus the fit-loop mode."""

    gamma: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    mode: str = "iterative"
    outer_iterations: int = 100
    reinit_noise_each_outer: bool = True
    gradient: str = "analytic"

    def __post_init__(self):
        if self.mode not in ("iterative", "recursive"):
            raise ContractError(f"unknown optimizer mode '{self.mode}'")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.gamma < 0 or self.epsilon <= 0:
            raise ContractError("gamma must be non-negative and epsilon positive")
        if self.outer_iterations < 1:
            raise ContractError("outer_iterations must be at least 1")
        if self.gradient not in ("fd", "analytic"):
            raise ContractError(f"unknown gradient method '{self.gradient}'")


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators; step t counts completed updates."""

    config: OptimizerConfig
    m: Array
    v: Array
    t: int
    lower_bounds: Array

    @classmethod
    def initialize(cls, config: OptimizerConfig,
                   lower_bounds: Array) -> "AdamState":
        lb = np.asarray(lower_bounds, dtype=float)
        return cls(config, np.zeros(lb.shape), np.zeros(lb.shape), 0, lb)


def adam_step(state: AdamState, theta: Array,
              ascent_grad: Array) -> tuple[AdamState, Array]:
    """One projected Adam ascent step.

    theta' = max(lower_bounds, theta + gamma * mhat / (sqrt(vhat) + eps))
    with bias-corrected moments. Returns the new optimizer state and theta.
    """
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(ascent_grad, dtype=float)
    if g.shape != theta.shape or theta.shape != state.m.shape:
        raise ContractError("gradient/theta length mismatch in optimizer step")
    cfg = state.config
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    theta_new = np.maximum(state.lower_bounds,
                           theta + cfg.gamma * mhat / (np.sqrt(vhat) + cfg.epsilon))
    return AdamState(cfg, m, v, t, state.lower_bounds), theta_new


@dataclass(frozen=True)
class FitReportRow:
    iteration: int
    total_nll: float
    frobenius_error: float
    theta: tuple


@dataclass
class FitResult:
    model: SubspaceModel
    state: FilterState
    rstate: RobustState | None
    report: list[FitReportRow]
    last_run: FilterRun
    theta_history: Array | None = None

    @property
    def theta(self) -> Array:
        return self.model.theta


def masked_frobenius(data: DataMatrix, C: Array, X: Array) -> float:
    """Frobenius norm of Y - C X over the observed entries.

    Masked-out values may be NaN, so they are zeroed before the difference is
    multiplied out.
    """
    diff = data.values - C @ X
    return float(np.linalg.norm(np.where(data.mask == 1, diff, 0.0)))


def _step_mode(robust: bool, mask_col: Array) -> str:
    if robust:
        return "robust"
    return "masked" if not mask_col.all() else "gaussian"


def _filtered_pass(model: SubspaceModel, data: DataMatrix,
                   state: FilterState | None, rstate: RobustState | None,
                   robust: bool, accumulate_grad: bool,
                   gradient: str) -> tuple:
    """One full pass; optionally accumulates the theta gradient of the summed
    objective, evaluated per step at the pre-update posteriors."""
    theta = model.theta
    grad = np.zeros(model.d_theta)
    H = model.obs_matrix
    X = np.empty((model.out_dim, data.n))
    Yhat = np.empty((data.d, data.n))
    Yvar = np.empty((data.d, data.n))
    entries: list[FilterTraceEntry] = []
    for j, (y, mask_col) in enumerate(data.columns()):
        if robust:
            prev_dict = rstate.base.dictionary
            prev_mu = rstate.base.coef.mean
            lam_prev = rstate.lam
            rstate, entry = robust_filter_step(rstate, model, y, mask_col)
            cur = rstate.base
        else:
            prev_dict = state.dictionary
            prev_mu = state.coef.mean
            lam_prev = None
            state, entry = filter_step(state, model, y, mask_col)
            cur = state
        entries.append(entry)
        X[:, j] = cur.coef.mean if H is None else H @ cur.coef.mean
        Yhat[:, j] = entry.predictive_mean
        Yvar[:, j] = entry.predictive_var
        if accumulate_grad and entry.observed_count > 0 and model.d_theta > 0:
            ctx = NllContext(model, entry.k, prev_dict, prev_mu, y, entry.eta,
                             _step_mode(robust, mask_col), lam_prev,
                             mask_col if not mask_col.all() else None)
            grad += nll_gradient(theta, ctx, method=gradient)
    final_state = rstate.base if robust else state
    run = FilterRun(final_state, entries, X, Yhat, Yvar)
    return state, rstate, run, grad


def iterative_fit(data: DataMatrix, model: SubspaceModel, noise: NoiseConfig,
                  opt: OptimizerConfig, robust: bool = False,
                  lam0: float | None = None) -> FitResult:
    """Repeated filtering passes with one optimizer step per pass.

    After each pass the next one warm-starts from the final posteriors
    (dictionary mean, coefficient mean and covariance, and the dictionary
    covariance unless reinit_noise_each_outer resets it to V0 along with Q, R
    and, for the robust filter, the degrees of freedom).
    """
    if robust and lam0 is None:
        raise ContractError("robust fit requires lam0")
    theta = model.theta.copy()
    adam = AdamState.initialize(opt, model.lower_bounds)
    dict0 = DictionaryPosterior(noise.C0, noise.V0)
    coef0 = CoefficientPosterior(noise.mu0, noise.P0)
    lam = lam0
    Q_cur, R_cur = noise.Q, noise.R
    report: list[FitReportRow] = []
    rstate = None
    state = None
    run = None
    for i in range(1, opt.outer_iterations + 1):
        mdl = model.with_theta(theta)
        base = FilterState(dict0, coef0, noise, 0)
        if robust:
            rstate = RobustState(base, lam, lam0, Q_cur, R_cur)
            state = None
        else:
            state = base
        state, rstate, run, grad = _filtered_pass(
            mdl, data, state, rstate, robust, accumulate_grad=True,
            gradient=opt.gradient)
        frob = masked_frobenius(data, run.state.dictionary.mean, run.coef_means)
        report.append(FitReportRow(i, run.total_nll, frob, tuple(theta)))
        adam, theta = adam_step(adam, theta, -grad)
        final = run.state
        dict0 = DictionaryPosterior(
            final.dictionary.mean,
            noise.V0 if opt.reinit_noise_each_outer else final.dictionary.col_cov)
        coef0 = final.coef
        if robust:
            if opt.reinit_noise_each_outer:
                lam, Q_cur, R_cur = lam0, noise.Q, noise.R
            else:
                lam, Q_cur, R_cur = rstate.lam, rstate.Q_current, rstate.R_current
    return FitResult(model.with_theta(theta), run.state, rstate, report, run)


def recursive_steps(stream, model: SubspaceModel, noise: NoiseConfig,
                    opt: OptimizerConfig, robust: bool = False,
                    lam0: float | None = None):
    """Generator over (theta, state-or-robust-state, trace entry) with theta
    updated after every filter step. Constant memory in the stream length."""
    if robust and lam0 is None:
        raise ContractError("robust fit requires lam0")
    from .filtering import initial_state
    from .robust import robust_initial_state

    theta = model.theta.copy()
    adam = AdamState.initialize(opt, model.lower_bounds)
    holder = robust_initial_state(noise, lam0) if robust else initial_state(noise)
    for y, mask_col in stream:
        mdl = model.with_theta(theta)
        if robust:
            prev_dict = holder.base.dictionary
            prev_mu = holder.base.coef.mean
            lam_prev = holder.lam
            holder, entry = robust_filter_step(holder, mdl, y, mask_col)
        else:
            prev_dict = holder.dictionary
            prev_mu = holder.coef.mean
            lam_prev = None
            holder, entry = filter_step(holder, mdl, y, mask_col)
        if entry.observed_count > 0 and model.d_theta > 0:
            ctx = NllContext(mdl, entry.k, prev_dict, prev_mu, y, entry.eta,
                             _step_mode(robust, mask_col), lam_prev,
                             mask_col if not mask_col.all() else None)
            grad = nll_gradient(theta, ctx, method=opt.gradient)
            adam, theta = adam_step(adam, theta, -grad)
        yield theta, holder, entry


def recursive_fit(data: DataMatrix, model: SubspaceModel, noise: NoiseConfig,
                  opt: OptimizerConfig, robust: bool = False,
                  lam0: float | None = None) -> FitResult:
    """Single-pass fit with a per-step parameter update."""
    H = model.obs_matrix
    X = np.empty((model.out_dim, data.n))
    Yhat = np.empty((data.d, data.n))
    Yvar = np.empty((data.d, data.n))
    entries: list[FilterTraceEntry] = []
    history = np.empty((data.n, model.d_theta))
    report: list[FitReportRow] = []
    cum_nll = 0.0
    holder = None
    theta = model.theta
    for j, (theta, holder, entry) in enumerate(
            recursive_steps(data.columns(), model, noise, opt, robust, lam0)):
        base = holder.base if robust else holder
        entries.append(entry)
        X[:, j] = base.coef.mean if H is None else H @ base.coef.mean
        Yhat[:, j] = entry.predictive_mean
        Yvar[:, j] = entry.predictive_var
        history[j] = theta
        cum_nll += entry.nll_increment
        report.append(FitReportRow(entry.k, cum_nll, float("nan"), tuple(theta)))
    base = holder.base if robust else holder
    run = FilterRun(base, entries, X, Yhat, Yvar)
    if report:
        frob = masked_frobenius(data, base.dictionary.mean, X)
        last = report[-1]
        report[-1] = FitReportRow(last.iteration, last.total_nll, frob, last.theta)
    return FitResult(model.with_theta(theta), base,
                     holder if robust else None, report, run,
                     theta_history=history)
