"""Synthetic benchmarks, imputation metrics, and correctness oracles.

Random numbers come from counter-based Philox streams keyed by (seed,
stream id), so the draws for the true dictionary, the latent path, the
measurement noise, and any mask are mutually independent and insensitive to
the order in which a caller consumes them.

Two oracles back the filter's algebra in the test suite: a vectorized Kalman
update on vec(C) that must reproduce the rank-one dictionary update exactly,
and the optimal Kalman filter run with the true dictionary for the
convergence experiment, compared through the Gaussian 2-Wasserstein distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    Array,
    DataMatrix,
    NoiseConfig,
    sqrt_psd,
    symmetrize_spd,
)
from .errors import ContractError
from .filtering import filter_step, initial_state
from .subspace import GPMaternParams, SubspaceModel, eval_f

NOISE_KINDS = ("gaussian", "student_t")

# Philox stream ids; keeping them fixed makes every generated quantity a pure
# function of (seed, stream).
_STREAM_DICTIONARY = 0
_STREAM_STATE = 1
_STREAM_NOISE = 2
_STREAM_MASK = 3
_STREAM_INIT = 4


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Independent counter-based generator for (seed, stream)."""
    if seed < 0:
        raise ContractError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a simulated dataset.

    theta_true parameterizes the transition; n_forecast extra columns are
    generated past the training horizon so forecasts can be scored. noise
    selects the measurement noise family; student_t draws one scale per time
    step, shared across dimensions. process_noise_scale is the standard
    deviation of the additive state noise (ignored for the GP kind, which
    uses its exact discretized covariance).
    """

    d: int
    r: int
    n: int
    n_forecast: int = 0
    theta_true: tuple = ()
    noise: str = "gaussian"
    noise_dof: float = 3.0
    noise_scale: float = 0.1
    seed: int = 0
    model_kind: str = "cosine_periodic"
    process_noise_scale: float = 0.0
    gp: GPMaternParams | None = None

    def __post_init__(self):
        if self.d < 1 or self.r < 1 or self.n < 1 or self.n_forecast < 0:
            raise ContractError("dimensions must be positive")
        if self.noise not in NOISE_KINDS:
            raise ContractError(f"unknown noise kind '{self.noise}'")
        if self.noise == "student_t" and self.noise_dof <= 0:
            raise ContractError("student_t noise needs positive dof")
        if self.noise_scale < 0 or self.process_noise_scale < 0:
            raise ContractError("noise scales must be non-negative")
        object.__setattr__(self, "theta_true",
                           tuple(float(t) for t in np.atleast_1d(self.theta_true)))


def build_model(spec: SyntheticSpec) -> SubspaceModel:
    theta = np.asarray(spec.theta_true, dtype=float)
    kind = spec.model_kind
    if kind == "random_walk":
        return SubspaceModel.random_walk(spec.r)
    if kind == "cosine_periodic":
        if theta.shape[0] != spec.r:
            raise ContractError("cosine model needs one frequency per coordinate")
        return SubspaceModel.cosine_periodic(theta)
    if kind == "sin_cos_periodic":
        return SubspaceModel.sin_cos_periodic(theta, spec.r)
    if kind == "linear":
        return SubspaceModel.linear(theta=theta, state_dim=spec.r)
    if kind == "gp_matern32":
        if spec.gp is None:
            raise ContractError("gp_matern32 needs GPMaternParams")
        return SubspaceModel.gp_matern32(spec.gp)
    raise ContractError(f"unknown model kind '{kind}'")


def draw_measurement_noise(spec: SyntheticSpec, n_total: int) -> Array:
    """(d, n_total) noise draws; student_t uses one chi-square scale per step."""
    rng = rng_stream(spec.seed, _STREAM_NOISE)
    g = rng.standard_normal((spec.d, n_total))
    if spec.noise == "gaussian":
        return spec.noise_scale * g
    chi2 = rng.chisquare(spec.noise_dof, size=n_total)
    scale = np.sqrt(spec.noise_dof / chi2)
    return spec.noise_scale * g * scale[None, :]


def generate_synthetic(spec: SyntheticSpec) -> tuple[DataMatrix, Array, Array]:
    """Simulate the generative model.

    Returns (data, C_true, X_true) where data has n + n_forecast fully
    observed columns, C_true is d x r, and X_true holds the feature
    trajectory the dictionary multiplies. Deterministic periodic kinds start
    from the zero state (the filter shares this initial point); stochastic
    kinds draw the start from the init stream.
    """
    model = build_model(spec)
    n_total = spec.n + spec.n_forecast
    c_rng = rng_stream(spec.seed, _STREAM_DICTIONARY)
    C_true = c_rng.standard_normal((spec.d, spec.r))

    s = model.state_dim
    deterministic_start = spec.model_kind in ("cosine_periodic", "sin_cos_periodic")
    if deterministic_start:
        x = np.zeros(s)
    else:
        x = rng_stream(spec.seed, _STREAM_INIT).standard_normal(s)

    x_rng = rng_stream(spec.seed, _STREAM_STATE)
    H = model.obs_matrix
    if spec.model_kind == "gp_matern32":
        Q_sqrt = sqrt_psd(model.static.Q_model)
    else:
        Q_sqrt = None

    X = np.empty((model.out_dim, n_total))
    for k in range(1, n_total + 1):
        x = eval_f(model, x, k)
        if Q_sqrt is not None:
            x = x + Q_sqrt @ x_rng.standard_normal(s)
        elif spec.process_noise_scale > 0:
            x = x + spec.process_noise_scale * x_rng.standard_normal(s)
        X[:, k - 1] = x if H is None else H @ x

    Y = C_true @ X + draw_measurement_noise(spec, n_total)
    return DataMatrix.fully_observed(Y), C_true, X


def generate_segment_mask(d: int, n: int, segment_len: int,
                          target_fraction: float, seed: int) -> Array:
    """Binary mask with contiguous missing runs.

    Runs of `segment_len` steps are removed at uniformly random (dimension,
    start) positions, overlaps allowed and runs truncated at the series end,
    until the missing fraction reaches target_fraction. The final fraction
    lands in [target, target + segment_len / (d n)].
    """
    if segment_len < 1 or segment_len > n:
        raise ContractError("segment_len must lie in [1, n]")
    if not 0.0 < target_fraction < 1.0:
        raise ContractError("target_fraction must lie in (0, 1)")
    rng = rng_stream(seed, _STREAM_MASK)
    mask = np.ones((d, n), dtype=np.uint8)
    total = d * n
    while (total - mask.sum()) / total < target_fraction:
        i = int(rng.integers(d))
        start = int(rng.integers(n))
        mask[i, start:start + segment_len] = 0
    return mask


@dataclass(frozen=True)
class ImputationMetrics:
    rmse: float
    coverage: float
    count: int


def imputation_metrics(y_true: Array, y_hat: Array, y_var: Array,
                       holdout: Array) -> ImputationMetrics:
    """Score imputed values on held-out entries.

    holdout is 1 at entries that were hidden from the filter but whose truth
    is known. rmse is over those entries; coverage is the fraction with
    |y - yhat| <= 2 sqrt(yvar).
    """
    sel = np.asarray(holdout).astype(bool)
    count = int(sel.sum())
    if count == 0:
        raise ContractError("holdout mask selects no entries")
    err = np.asarray(y_true, dtype=float)[sel] - np.asarray(y_hat, dtype=float)[sel]
    rmse = float(np.sqrt(np.mean(err ** 2)))
    band = 2.0 * np.sqrt(np.asarray(y_var, dtype=float)[sel])
    coverage = float(np.mean(np.abs(err) <= band))
    return ImputationMetrics(rmse, coverage, count)


def column_mean_baseline(data: DataMatrix) -> Array:
    """Impute every entry of a series with its observed per-series mean."""
    filled = np.where(data.mask == 1, data.values, 0.0)
    counts = data.mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("a series has no observed entries")
    means = filled.sum(axis=1) / counts
    return np.tile(means[:, None], (1, data.n))


def vectorized_kalman_oracle(c_prev: Array, L_prev: Array, H: Array, G: Array,
                             y: Array) -> tuple[Array, Array]:
    """Kalman measurement update on the stacked dictionary (test oracle).

    States c = vec(C) (column stacking), observation y = H c + noise with
    covariance G. Dense algebra throughout; O((dr)^3) and only meant for tiny
    test problems.
    """
    S = H @ L_prev @ H.T + G
    K = L_prev @ H.T @ np.linalg.solve(S, np.eye(S.shape[0]))
    c_post = c_prev + K @ (y - H @ c_prev)
    L_post = L_prev - K @ H @ L_prev
    return c_post, symmetrize_spd(L_post)


@dataclass(frozen=True)
class GaussianMoments:
    mean: Array
    cov: Array

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ContractError("moment shapes disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def wasserstein2_gaussian(g1: GaussianMoments, g2: GaussianMoments) -> float:
    """2-Wasserstein distance between Gaussians.

    W2^2 = ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S2^{1/2} S1 S2^{1/2})^{1/2});
    matrix square roots via symmetric eigendecomposition with negative
    eigenvalues from rounding clamped to zero.
    """
    if g1.mean.shape != g2.mean.shape:
        raise ContractError("moment dimensions disagree")
    s2_half = sqrt_psd(g2.cov)
    cross = sqrt_psd(s2_half @ g1.cov @ s2_half)
    gap = float(np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))
    d2 = float(np.sum((g1.mean - g2.mean) ** 2)) + max(gap, 0.0)
    return math.sqrt(max(d2, 0.0))


@dataclass
class ConvergenceResult:
    """Running-average distances to the optimal filter plus dictionary errors."""

    w2_running: Array
    c_err_initial: float
    c_err_final: float


def convergence_experiment(seed: int, n: int = 1000, d: int = 4,
                           q: float = 0.001, r_noise: float = 0.1,
                           v0: float = 1.0, p0: float = 0.01,
                           x0: float = 1.0,
                           c0_equals_truth: bool = False,
                           v0_zero: bool = False) -> ConvergenceResult:
    """Scalar random-walk factorization against the clairvoyant Kalman filter.

    A single latent random walk is observed through a fixed dictionary
    column. The factorization filter (dictionary unknown) and the optimal
    Kalman filter (dictionary known) run in lockstep on the same draws; the
    result holds the running average over steps of the 2-Wasserstein distance
    between their coefficient posteriors. With c0_equals_truth and v0_zero
    the two filters coincide and the distances are zero.
    """
    c_star = rng_stream(seed, _STREAM_DICTIONARY).standard_normal(d)
    c0 = (c_star.copy() if c0_equals_truth
          else rng_stream(seed, _STREAM_INIT).standard_normal(d))
    v0_val = 0.0 if v0_zero else v0

    noise = NoiseConfig(
        Q=np.array([[q]]), R=r_noise * np.eye(d), P0=np.array([[p0]]),
        V0=np.array([[v0_val]]), mu0=np.array([x0]), C0=c0[:, None])
    model = SubspaceModel.random_walk(1)
    state = initial_state(noise)

    proc_rng = rng_stream(seed, _STREAM_STATE)
    meas_rng = rng_stream(seed, _STREAM_NOISE)

    # clairvoyant Kalman filter, scalar state
    m_kf = x0
    p_kf = p0
    Cs = c_star[:, None]
    R = r_noise * np.eye(d)

    x = x0
    w2_running = np.empty(n)
    acc = 0.0
    for k in range(1, n + 1):
        x = x + math.sqrt(q) * proc_rng.standard_normal()
        y = c_star * x + math.sqrt(r_noise) * meas_rng.standard_normal(d)

        state, _ = filter_step(state, model, y)

        p_bar = p_kf + q
        S = p_bar * (Cs @ Cs.T) + R
        K = p_bar * np.linalg.solve(S, c_star)
        m_bar = m_kf
        m_kf = m_bar + float(K @ (y - c_star * m_bar))
        p_kf = p_bar - float(K @ c_star) * p_bar

        w2 = wasserstein2_gaussian(
            GaussianMoments(state.coef.mean, state.coef.cov),
            GaussianMoments(np.array([m_kf]), np.array([[p_kf]])))
        acc += w2
        w2_running[k - 1] = acc / k

    c_err_initial = float(np.linalg.norm(c0 - c_star))
    c_err_final = float(np.linalg.norm(state.dictionary.mean[:, 0] - c_star))
    return ConvergenceResult(w2_running, c_err_initial, c_err_final)
