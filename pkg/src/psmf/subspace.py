"""Latent subspace transition models.

Every model is a map f_theta(x, k) on the coefficient state together with its
Jacobian in x. Built-in kinds:

  random_walk       f(x) = x
  linear            f(x) = A x, with A either fixed or learned (theta = vec A)
  cosine_periodic   f(x)_i = cos(2 pi theta_i k + x_i), one frequency per
                    coordinate
  sin_cos_periodic  f(x)_i = t1 sin(2 pi t2 k + t3 x_i) + t4 cos(2 pi t5 k + t6 x_i),
                    six parameters shared across coordinates
  gp_matern32       f(x) = A x on an augmented (value, derivative) state, the
                    exact discretization of independent Matern-3/2 processes;
                    observation reads features H x

Custom models supply a callable and fall back to finite differences for both
Jacobians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .core import Array, symmetrize_spd
from .errors import ContractError, DiscretizationError, DivergenceError

KINDS = (
    "random_walk",
    "linear",
    "cosine_periodic",
    "sin_cos_periodic",
    "gp_matern32",
    "custom",
)

TWO_PI = 2.0 * math.pi

# Central-difference steps for the fallback Jacobians.
_JAC_STEP = 1e-6
_GRAD_STEP = 1e-7


def matrix_exponential(M: Array) -> Array:
    """Matrix exponential by scaling-and-squaring with a fixed-order series.

    The input is scaled by 2^-s until its norm is at most 1/2, a degree-18
    Taylor polynomial is summed, and the result is squared s times. For the
    small stable matrices this package produces the absolute error is far
    below 1e-12 * exp(||M||).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"matrix exponential needs a square matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DivergenceError("non-finite entries in matrix exponential input")
    norm = np.linalg.norm(M, np.inf)
    s = 0 if norm <= 0.5 else int(math.ceil(math.log2(norm / 0.5)))
    A = M / (2.0 ** s)
    n = M.shape[0]
    out = np.eye(n)
    term = np.eye(n)
    for i in range(1, 19):
        term = term @ A / i
        out = out + term
    for _ in range(s):
        out = out @ out
    if not np.all(np.isfinite(out)):
        raise DivergenceError("matrix exponential overflowed")
    return out


@dataclass(frozen=True)
class GPMaternParams:
    """Hyperparameters of the Matern-3/2 latent processes.

    sigma2: stationary variance, ell: lengthscale, step: time spacing between
    consecutive observations, rank: number of independent processes.
    """

    sigma2: float
    ell: float
    step: float
    rank: int

    def __post_init__(self):
        if self.sigma2 <= 0 or self.ell <= 0 or self.step <= 0:
            raise ContractError("sigma2, ell and step must be positive")
        if self.rank < 1:
            raise ContractError("rank must be at least 1")

    @property
    def kappa(self) -> float:
        return math.sqrt(3.0) / self.ell

    @property
    def stationary_cov(self) -> Array:
        return np.diag([self.sigma2, 3.0 * self.sigma2 / self.ell ** 2])


def gp_discretize(params: GPMaternParams) -> tuple[Array, Array, Array]:
    """Exact discretization of the Matern-3/2 state-space model.

    Returns (A, Q, H) for the stacked state of `rank` independent processes,
    each carrying (value, derivative). A single process has companion drift
    F = [[0, 1], [-kappa^2, -2 kappa]], transition A_i = expm(step * F), and
    process noise Q_i = Pinf - A_i Pinf A_i^T chosen so the stationary
    covariance Pinf is preserved exactly: A_i Pinf A_i^T + Q_i = Pinf.
    """
    kappa = params.kappa
    F = np.array([[0.0, 1.0], [-kappa ** 2, -2.0 * kappa]])
    A_i = matrix_exponential(params.step * F)
    Pinf = params.stationary_cov
    Q_i = symmetrize_spd(Pinf - A_i @ Pinf @ A_i.T)
    eigs = np.linalg.eigvalsh(Q_i)
    if eigs[0] < -1e-12 * params.sigma2:
        raise DiscretizationError(
            f"discretized process noise indefinite (min eigenvalue {eigs[0]:.3e})"
        )
    eye = np.eye(params.rank)
    A = np.kron(eye, A_i)
    Q = np.kron(eye, Q_i)
    H = np.kron(eye, np.array([[1.0, 0.0]]))
    return A, Q, H


@dataclass(frozen=True)
class StaticMatrices:
    """Fixed matrices carried by linear-family models."""

    A: Array | None = None
    Q_model: Array | None = None
    H: Array | None = None


@dataclass(frozen=True)
class SubspaceModel:
    """A transition model plus its learnable parameters.

    theta holds the learnable parameters (possibly empty); lower_bounds has
    the same length and uses -inf for unconstrained coordinates. state_dim is
    the dimension of the coefficient state the filter tracks; for the GP kind
    this is twice the feature rank and `obs_matrix` projects states to
    features, otherwise features and states coincide.
    """

    kind: str
    theta: Array
    lower_bounds: Array
    state_dim: int
    static: StaticMatrices | None = None
    transition_fn: Callable[[Array, Array, int], Array] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown model kind '{self.kind}'")
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        bounds = np.atleast_1d(np.asarray(self.lower_bounds, dtype=float))
        if theta.shape != bounds.shape:
            raise ContractError("theta and lower_bounds must have equal length")
        if np.any(theta < bounds):
            raise ContractError("theta starts below its lower bounds")
        if self.state_dim < 1:
            raise ContractError("state_dim must be positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "lower_bounds", bounds)

    # ---------------------------------------------------------------- factories

    @classmethod
    def random_walk(cls, rank: int) -> "SubspaceModel":
        return cls("random_walk", np.zeros(0), np.zeros(0), rank)

    @classmethod
    def linear(cls, A: Array | None = None, theta: Array | None = None,
               state_dim: int | None = None) -> "SubspaceModel":
        """Fixed transition when A is given; otherwise theta = vec(A) row-major."""
        if A is not None:
            A = np.asarray(A, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ContractError("A must be square")
            return cls("linear", np.zeros(0), np.zeros(0), A.shape[0],
                       static=StaticMatrices(A=A))
        if theta is None or state_dim is None:
            raise ContractError("learned linear model needs theta and state_dim")
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (state_dim * state_dim,):
            raise ContractError("theta must have state_dim^2 entries")
        return cls("linear", theta, np.full(theta.shape, -np.inf), state_dim)

    @classmethod
    def cosine_periodic(cls, theta: Array) -> "SubspaceModel":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return cls("cosine_periodic", theta, np.zeros_like(theta), theta.shape[0])

    @classmethod
    def sin_cos_periodic(cls, theta: Array, rank: int) -> "SubspaceModel":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (6,):
            raise ContractError("sin_cos_periodic takes exactly six parameters")
        return cls("sin_cos_periodic", theta, np.zeros(6), rank)

    @classmethod
    def gp_matern32(cls, params: GPMaternParams) -> "SubspaceModel":
        A, Q, H = gp_discretize(params)
        return cls("gp_matern32", np.zeros(0), np.zeros(0), 2 * params.rank,
                   static=StaticMatrices(A=A, Q_model=Q, H=H))

    @classmethod
    def custom(cls, fn: Callable[[Array, Array, int], Array], theta: Array,
               state_dim: int, lower_bounds: Array | None = None) -> "SubspaceModel":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if lower_bounds is None:
            lower_bounds = np.full(theta.shape, -np.inf)
        return cls("custom", theta, lower_bounds, state_dim, transition_fn=fn)

    # ---------------------------------------------------------------- properties

    @property
    def d_theta(self) -> int:
        return self.theta.shape[0]

    @property
    def obs_matrix(self) -> Array | None:
        """Projection from state to observed features; None means identity."""
        if self.kind == "gp_matern32":
            return self.static.H
        return None

    @property
    def out_dim(self) -> int:
        """Dimension of the feature vector the dictionary multiplies."""
        H = self.obs_matrix
        return self.state_dim if H is None else H.shape[0]

    def with_theta(self, theta: Array) -> "SubspaceModel":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != self.theta.shape:
            raise ContractError("replacement theta has the wrong length")
        return replace(self, theta=theta)

    def transition_matrix(self) -> Array:
        if self.kind == "random_walk":
            return np.eye(self.state_dim)
        if self.static is not None and self.static.A is not None:
            return self.static.A
        s = self.state_dim
        return self.theta.reshape(s, s)


def _check_state(model: SubspaceModel, x: Array) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise ContractError(
            f"state must have shape ({model.state_dim},), got {x.shape}"
        )
    return x


def eval_f(model: SubspaceModel, x: Array, k: int) -> Array:
    """Evaluate the transition f_theta(x) at time index k (1-based)."""
    x = _check_state(model, x)
    t = model.theta
    if model.kind == "random_walk":
        return x.copy()
    if model.kind in ("linear", "gp_matern32"):
        return model.transition_matrix() @ x
    if model.kind == "cosine_periodic":
        return np.cos(TWO_PI * t * k + x)
    if model.kind == "sin_cos_periodic":
        a = TWO_PI * t[1] * k + t[2] * x
        b = TWO_PI * t[4] * k + t[5] * x
        return t[0] * np.sin(a) + t[3] * np.cos(b)
    return np.asarray(model.transition_fn(t, x, k), dtype=float)


def jacobian_f(model: SubspaceModel, x: Array, k: int) -> Array:
    """Jacobian of f_theta with respect to the state, evaluated at x.

    Analytic for the built-in kinds; central finite differences with step
    h_i = max(1e-6, 1e-6 |x_i|) for custom models.
    """
    x = _check_state(model, x)
    t = model.theta
    if model.kind == "random_walk":
        return np.eye(model.state_dim)
    if model.kind in ("linear", "gp_matern32"):
        return model.transition_matrix().copy()
    if model.kind == "cosine_periodic":
        return np.diag(-np.sin(TWO_PI * t * k + x))
    if model.kind == "sin_cos_periodic":
        a = TWO_PI * t[1] * k + t[2] * x
        b = TWO_PI * t[4] * k + t[5] * x
        return np.diag(t[0] * t[2] * np.cos(a) - t[3] * t[5] * np.sin(b))
    return _fd_state_jacobian(model, x, k)


def _fd_state_jacobian(model: SubspaceModel, x: Array, k: int) -> Array:
    s = model.state_dim
    J = np.empty((s, s))
    for i in range(s):
        h = max(_JAC_STEP, _JAC_STEP * abs(x[i]))
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        J[:, i] = (eval_f(model, xp, k) - eval_f(model, xm, k)) / (2.0 * h)
    return J


def theta_jacobian(model: SubspaceModel, x: Array, k: int) -> Array:
    """Jacobian of f_theta(x) with respect to theta, shape (state_dim, d_theta).

    Analytic for built-in kinds, central finite differences for custom ones.
    Empty (state_dim x 0) when the model has no learnable parameters.
    """
    x = _check_state(model, x)
    t = model.theta
    if model.d_theta == 0:
        return np.zeros((model.state_dim, 0))
    if model.kind == "linear":
        # f_i = sum_q A[i, q] x_q with theta laid out row-major
        return np.kron(np.eye(model.state_dim), x[None, :])
    if model.kind == "cosine_periodic":
        return np.diag(-np.sin(TWO_PI * t * k + x) * TWO_PI * k)
    if model.kind == "sin_cos_periodic":
        a = TWO_PI * t[1] * k + t[2] * x
        b = TWO_PI * t[4] * k + t[5] * x
        J = np.empty((model.state_dim, 6))
        J[:, 0] = np.sin(a)
        J[:, 1] = t[0] * np.cos(a) * TWO_PI * k
        J[:, 2] = t[0] * np.cos(a) * x
        J[:, 3] = np.cos(b)
        J[:, 4] = -t[3] * np.sin(b) * TWO_PI * k
        J[:, 5] = -t[3] * np.sin(b) * x
        return J
    J = np.empty((model.state_dim, model.d_theta))
    for i in range(model.d_theta):
        h = max(_GRAD_STEP, _GRAD_STEP * abs(t[i]))
        tp = t.copy(); tp[i] += h
        tm = t.copy(); tm[i] -= h
        J[:, i] = (
            eval_f(model.with_theta(tp), x, k) - eval_f(model.with_theta(tm), x, k)
        ) / (2.0 * h)
    return J
