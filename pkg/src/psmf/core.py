"""Shared value types and covariance hygiene for the factorization filters.

Containers are frozen dataclasses holding numpy arrays. They are treated as
immutable after construction: updates build new instances, and no routine in
this package writes into an array it received. Constructors validate shapes
and cheap structural invariants; expensive checks (eigenvalue floors) live in
`check_psd` and are exercised by the test suite at module boundaries.

Covariance repair policy: every covariance produced by an update passes
through `symmetrize_spd` ((M + M.T)/2, exact symmetry in floating point). No
eigenvalue clamping is applied anywhere; a covariance that fails the PSD
floor is a bug, not something to paper over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    DivergenceError,
    EmptyObservationError,
    SingularMatrixError,
)

Array = np.ndarray

# Relative eigenvalue floor for PSD checks: eigenvalues of a d x d covariance
# may dip below zero by at most this fraction of the trace before we call it
# a failure.
PSD_FLOOR = -1e-10

# Condition-number ceiling beyond which linear solves are refused.
_COND_LIMIT = 1e14


def symmetrize_spd(M: Array) -> Array:
    """Return the symmetric part (M + M.T)/2, rejecting non-finite input.

    The output is exactly symmetric in floating point because addition is
    commutative entrywise.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DivergenceError("non-finite entries in matrix to symmetrize")
    return (M + M.T) / 2.0


def check_psd(M: Array, name: str = "matrix") -> None:
    """Raise if M is not symmetric PSD up to the relative eigenvalue floor."""
    M = np.asarray(M, dtype=float)
    if not np.array_equal(M, M.T):
        raise ContractError(f"{name} is not exactly symmetric")
    if M.shape[0] == 0:
        return
    eigs = np.linalg.eigvalsh(M)
    floor = PSD_FLOOR * max(np.trace(M), 1.0)
    if eigs[0] < floor:
        raise ContractError(
            f"{name} has eigenvalue {eigs[0]:.3e} below floor {floor:.3e}"
        )


def sqrt_psd(M: Array) -> Array:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Small negative eigenvalues from rounding are clamped to zero. This is the
    only place in the package where clamping happens, and it affects only
    derived quantities (distances, sample draws), never filter state.
    """
    M = np.asarray(M, dtype=float)
    w, U = np.linalg.eigh((M + M.T) / 2.0)
    w = np.maximum(w, 0.0)
    return (U * np.sqrt(w)) @ U.T


def solve_spd(S: Array, b: Array, name: str = "system") -> Array:
    """Solve S x = b for symmetric positive definite S with a condition guard."""
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularMatrixError(f"{name} is singular or near-singular", cond=cond)
    return np.linalg.solve(S, b)


def woodbury_solve(C: Array, P: Array, r_diag: Array, B: Array) -> Array:
    """Solve (C P C^T + diag(r_diag)) X = B through an r x r inner system.

    Uses the matrix inversion lemma in the form that never inverts P, so a
    singular (even zero) P is fine:

        A^{-1} = D^{-1} - D^{-1} C P (I + C^T D^{-1} C P)^{-1} C^T D^{-1}

    with D = diag(r_diag). B may be a vector or a matrix of stacked
    right-hand sides. Cost is O(d r) plus one r x r solve, never O(d^3).
    """
    C = np.asarray(C, dtype=float)
    P = np.asarray(P, dtype=float)
    r_diag = np.asarray(r_diag, dtype=float)
    B = np.asarray(B, dtype=float)
    d, r = C.shape
    if r_diag.shape != (d,):
        raise ContractError(f"r_diag must have shape ({d},), got {r_diag.shape}")
    if np.any(r_diag <= 0):
        raise ContractError("diagonal noise entries must be strictly positive")
    if P.shape != (r, r):
        raise ContractError(f"P must have shape ({r},{r}), got {P.shape}")

    vec_in = B.ndim == 1
    if vec_in:
        B = B[:, None]
    U = B / r_diag[:, None]                      # D^{-1} B
    W = C / r_diag[:, None]                      # D^{-1} C
    inner = np.eye(r) + (C.T @ W) @ P            # I + C^T D^{-1} C P
    cond = np.linalg.cond(inner)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularMatrixError("inner system in low-rank solve", cond=cond)
    Z = np.linalg.solve(inner, C.T @ U)
    X = U - W @ (P @ Z)
    return X[:, 0] if vec_in else X


def woodbury_apply(C: Array, P_bar: Array, r_diag: Array, v: Array) -> Array:
    """Apply (C P_bar C^T + diag(r_diag))^{-1} to the vector v.

    Precondition: r_diag strictly positive; shapes consistent. Raises a
    singularity error with a condition estimate when the inner r x r system
    cannot be solved reliably.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ContractError(f"v must be a vector, got shape {v.shape}")
    return woodbury_solve(C, P_bar, r_diag, v)


@dataclass(frozen=True)
class DataMatrix:
    """Observed data, d series by n time steps, with a binary observation mask.

    mask[i, k] == 1 means entry (i, k) was observed. Values at masked-out
    entries are never read by the filters; loaders store NaN there.
    """

    values: Array
    mask: Array

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask)
        if values.ndim != 2:
            raise ContractError(f"values must be 2-D, got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ContractError("data matrix must be at least 1 x 1")
        if mask.shape != values.shape:
            raise ContractError(
                f"mask shape {mask.shape} does not match values {values.shape}"
            )
        uniq = np.unique(mask)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ContractError("mask entries must be 0 or 1")
        mask = mask.astype(np.uint8)
        if not np.all(np.isfinite(values[mask == 1])):
            raise ContractError("observed entries must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @classmethod
    def fully_observed(cls, values: Array) -> "DataMatrix":
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones_like(values, dtype=np.uint8))

    def column(self, j: int) -> tuple[Array, Array]:
        """Observation vector and boolean mask for time step j (0-based)."""
        return self.values[:, j], self.mask[:, j].astype(bool)

    def columns(self):
        for j in range(self.n):
            yield self.column(j)

    def observed_fraction(self) -> float:
        return float(self.mask.mean())


def _require_symmetric(M: Array, name: str) -> Array:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * (1.0 + np.abs(M).max(initial=0.0))):
        raise ContractError(f"{name} must be symmetric")
    return symmetrize_spd(M)


@dataclass(frozen=True)
class DictionaryPosterior:
    """Matrix-normal posterior over the dictionary: mean (d x r) and the
    r x r column covariance V, so cov(vec C) = V kron I_d."""

    mean: Array
    col_cov: Array

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim != 2:
            raise ContractError(f"dictionary mean must be 2-D, got {mean.shape}")
        if not np.all(np.isfinite(mean)):
            raise DivergenceError("non-finite dictionary mean")
        col_cov = _require_symmetric(self.col_cov, "dictionary column covariance")
        if col_cov.shape[0] != mean.shape[1]:
            raise ContractError(
                f"column covariance is {col_cov.shape} but mean has "
                f"{mean.shape[1]} columns"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "col_cov", col_cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.mean.shape[1]


@dataclass(frozen=True)
class CoefficientPosterior:
    """Gaussian posterior over the latent coefficient state."""

    mean: Array
    cov: Array

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim != 1:
            raise ContractError(f"coefficient mean must be 1-D, got {mean.shape}")
        if not np.all(np.isfinite(mean)):
            raise DivergenceError("non-finite coefficient mean")
        cov = _require_symmetric(self.cov, "coefficient covariance")
        if cov.shape[0] != mean.shape[0]:
            raise ContractError(
                f"covariance {cov.shape} does not match mean length {mean.shape[0]}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class NoiseConfig:
    """Initial conditions and noise covariances for one filter run.

    Q: process noise (state_dim x state_dim)
    R: observation noise (d x d), flagged diagonal when exactly diagonal
    P0: initial coefficient covariance
    V0: initial dictionary column covariance (r x r)
    mu0: initial coefficient mean
    C0: initial dictionary mean (d x r)
    """

    Q: Array
    R: Array
    P0: Array
    V0: Array
    mu0: Array
    C0: Array
    r_diagonal: bool | None = None

    def __post_init__(self):
        Q = _require_symmetric(self.Q, "Q")
        R = _require_symmetric(self.R, "R")
        P0 = _require_symmetric(self.P0, "P0")
        V0 = _require_symmetric(self.V0, "V0")
        mu0 = np.asarray(self.mu0, dtype=float)
        C0 = np.asarray(self.C0, dtype=float)
        if mu0.ndim != 1 or C0.ndim != 2:
            raise ContractError("mu0 must be a vector and C0 a matrix")
        s = mu0.shape[0]
        d, r = C0.shape
        if Q.shape != (s, s) or P0.shape != (s, s):
            raise ContractError("Q and P0 must match the state dimension")
        if R.shape != (d, d):
            raise ContractError("R must match the data dimension")
        if V0.shape != (r, r):
            raise ContractError("V0 must match the dictionary rank")
        r_diagonal = self.r_diagonal
        if r_diagonal is None:
            r_diagonal = bool(np.count_nonzero(R - np.diag(np.diag(R))) == 0)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "V0", V0)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "C0", C0)
        object.__setattr__(self, "r_diagonal", r_diagonal)

    @property
    def d(self) -> int:
        return self.C0.shape[0]

    @property
    def rank(self) -> int:
        return self.C0.shape[1]

    @property
    def state_dim(self) -> int:
        return self.mu0.shape[0]


def observed_indices(mask: Array | None, d: int) -> Array:
    """Boolean index of observed dimensions; full when mask is None."""
    if mask is None:
        return np.ones(d, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != (d,):
        raise ContractError(f"mask must have shape ({d},), got {mask.shape}")
    return mask.astype(bool)


def require_observations(obs: Array) -> int:
    m = int(obs.sum())
    if m == 0:
        raise EmptyObservationError("step has no observed entries")
    return m
