"""Shared helpers for the test suite.

Oracles here are deliberately naive: dense solves, explicit loops, high-order
series. They trade speed for obviousness so the fast implementations in the
package can be checked against something independently convincing.
"""

from __future__ import annotations

import numpy as np
import pytest

import psmf


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[987654321, seed]))


def random_spd(gen: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    A = gen.standard_normal((n, n))
    return scale * (A @ A.T + n * np.eye(n))


def random_psd(gen: np.random.Generator, n: int, rank: int | None = None,
               scale: float = 1.0) -> np.ndarray:
    if rank is None:
        rank = n
    A = gen.standard_normal((n, rank))
    return scale * (A @ A.T)


def dense_solve_oracle(C, P, r_diag, b):
    """(C P C^T + diag(r_diag))^{-1} b via a plain dense solve."""
    A = C @ P @ C.T + np.diag(r_diag)
    return np.linalg.solve(A, b)


def make_noise(gen, d, r, s=None, q=0.0, r_scale=1.0, p0=0.0, v0=0.1,
               mu0=None, C0=None, R=None):
    if s is None:
        s = r
    if mu0 is None:
        mu0 = np.zeros(s)
    if C0 is None:
        C0 = gen.standard_normal((d, r))
    if R is None:
        R = r_scale * np.eye(d)
    return psmf.NoiseConfig(Q=q * np.eye(s), R=R, P0=p0 * np.eye(s),
                            V0=v0 * np.eye(r), mu0=mu0, C0=C0)


def run_steps(state, model, Y, masks=None):
    """Drive filter_step over the columns of Y; returns (state, entries)."""
    entries = []
    for j in range(Y.shape[1]):
        mask = None if masks is None else masks[:, j]
        state, entry = psmf.filter_step(state, model, Y[:, j], mask)
        entries.append(entry)
    return state, entries


@pytest.fixture
def gen():
    return rng(0)
