"""Filter mechanics: prediction, the two rank-one updates, masking, scaling.

The load-bearing check is the vectorized-Kalman equivalence: the O(d r)
dictionary update must reproduce a dense Kalman measurement update on the
stacked dictionary state, mean and Kronecker covariance factor alike.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import psmf
from psmf import (
    CoefficientPosterior,
    ContractError,
    DictionaryPosterior,
    DivergenceError,
    FilterState,
    NumericalError,
    SubspaceModel,
    compute_eta,
    filter_step,
    forecast,
    gaussian_nll_increment,
    initial_state,
    predict,
    reconstruct_and_impute,
    run_filter,
    update_coefficients,
    update_dictionary,
    vectorized_kalman_oracle,
)

from conftest import make_noise, random_spd, rng, run_steps


def eig_min(A):
    return float(np.linalg.eigvalsh(A).min())


class TestInitialState:
    def test_wires_config_into_posteriors(self, gen):
        noise = make_noise(gen, d=4, r=2, q=0.3, p0=0.7, v0=0.2)
        state = initial_state(noise)
        assert state.k == 0
        np.testing.assert_array_equal(state.dictionary.mean, noise.C0)
        np.testing.assert_array_equal(state.dictionary.col_cov, noise.V0)
        np.testing.assert_array_equal(state.coef.mean, noise.mu0)
        np.testing.assert_array_equal(state.coef.cov, noise.P0)

    def test_rejects_negative_step_index(self, gen):
        noise = make_noise(gen, d=3, r=2)
        with pytest.raises(ContractError):
            FilterState(DictionaryPosterior(noise.C0, noise.V0),
                        CoefficientPosterior(noise.mu0, noise.P0),
                        noise, k=-1)


class TestPredict:
    def test_random_walk_propagates_identity(self, gen):
        # mu_bar = mu, P_bar = P + Q for the identity transition
        noise = make_noise(gen, d=5, r=3, q=0.4, p0=1.0)
        mu = gen.standard_normal(3)
        P = random_spd(gen, 3)
        state = FilterState(DictionaryPosterior(noise.C0, noise.V0),
                            CoefficientPosterior(mu, P), noise, k=2)
        model = SubspaceModel.random_walk(3)
        mu_bar, P_bar, F = predict(state, model)
        np.testing.assert_allclose(mu_bar, mu, rtol=0, atol=0)
        np.testing.assert_allclose(P_bar, P + 0.4 * np.eye(3), atol=1e-14)
        np.testing.assert_array_equal(F, np.eye(3))

    def test_scalar_linear_doubling(self, gen):
        # A = 2, mu = 1, P = 1, Q = 1: mu_bar = 2 and P_bar = 2*1*2 + 1 = 5
        noise = make_noise(gen, d=2, r=1, q=1.0)
        state = FilterState(DictionaryPosterior(noise.C0, noise.V0),
                            CoefficientPosterior(np.ones(1), np.eye(1)),
                            noise, k=0)
        model = SubspaceModel.linear(A=np.array([[2.0]]))
        mu_bar, P_bar, F = predict(state, model)
        assert mu_bar[0] == pytest.approx(2.0)
        assert P_bar[0, 0] == pytest.approx(5.0)
        assert F[0, 0] == pytest.approx(2.0)

    def test_zero_q_zero_p_gives_zero_p_bar(self, gen):
        noise = make_noise(gen, d=3, r=2, q=0.0, p0=0.0)
        state = initial_state(noise)
        model = SubspaceModel.cosine_periodic(np.array([0.1, 0.2]))
        _, P_bar, _ = predict(state, model)
        np.testing.assert_array_equal(P_bar, np.zeros((2, 2)))

    def test_dimension_mismatch_rejected(self, gen):
        noise = make_noise(gen, d=3, r=2)
        state = initial_state(noise)
        with pytest.raises(ContractError):
            predict(state, SubspaceModel.random_walk(5))


class TestComputeEta:
    def test_two_dim_identity_example(self):
        # tr(10 I_2)/2 + tr(I I I)/2 = 10 + 1 = 11
        eta = compute_eta(np.eye(2), np.eye(2), 10.0 * np.eye(2))
        assert eta == pytest.approx(11.0)

    def test_masked_uses_observed_rows_only(self):
        # rows (1,0) and (0,2): unmasked (10+1+10+4)/2, row 1 alone (10+4)/1
        C = np.array([[1.0, 0.0], [0.0, 2.0]])
        R = 10.0 * np.eye(2)
        assert compute_eta(C, np.eye(2), R) == pytest.approx(12.5)
        mask = np.array([0.0, 1.0])
        assert compute_eta(C, np.eye(2), R, mask) == pytest.approx(14.0)

    def test_matches_naive_loop(self, gen):
        d, r = 7, 3
        C = gen.standard_normal((d, r))
        P = random_spd(gen, r)
        R = np.diag(gen.uniform(0.5, 2.0, d))
        mask = np.array([1, 0, 1, 1, 0, 1, 1], dtype=float)
        S = C @ P @ C.T + R
        obs = mask.astype(bool)
        expected = float(np.trace(S[np.ix_(obs, obs)])) / obs.sum()
        assert compute_eta(C, P, R, mask) == pytest.approx(expected, rel=1e-12)

    def test_nonpositive_eta_rejected(self):
        with pytest.raises(NumericalError):
            compute_eta(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros((2, 2)))

    def test_all_missing_rejected(self):
        with pytest.raises(ContractError):
            compute_eta(np.eye(2), np.eye(2), np.eye(2), np.zeros(2))


class TestDictionaryUpdate:
    def test_scalar_example(self):
        # C = 1, V = 1, mu_bar = 1, eta = 1, y = 2:
        # denom = 1 + 1 = 2, C' = 1 + (2 - 1)/2 = 1.5, V' = 1 - 1/2 = 0.5
        prior = DictionaryPosterior(np.array([[1.0]]), np.array([[1.0]]))
        post = update_dictionary(prior, np.array([1.0]), np.array([2.0]), 1.0)
        assert post.mean[0, 0] == pytest.approx(1.5)
        assert post.col_cov[0, 0] == pytest.approx(0.5)

    def test_zero_innovation_fixes_mean(self, gen):
        d, r = 6, 3
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.1))
        mu_bar = gen.standard_normal(r)
        y = prior.mean @ mu_bar
        post = update_dictionary(prior, mu_bar, y, eta=0.5)
        np.testing.assert_allclose(post.mean, prior.mean, atol=1e-12)
        # covariance still contracts: the update learned that direction
        assert eig_min(prior.col_cov - post.col_cov) >= -1e-12

    def test_masked_rows_left_untouched(self, gen):
        d, r = 4, 2
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.1))
        mu_bar = gen.standard_normal(r)
        y = gen.standard_normal(d)
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        post = update_dictionary(prior, mu_bar, y, eta=1.0, mask=mask)
        np.testing.assert_array_equal(post.mean[1], prior.mean[1])
        np.testing.assert_array_equal(post.mean[3], prior.mean[3])
        assert not np.allclose(post.mean[0], prior.mean[0])

    def test_masked_covariance_keeps_unmasked_form(self, gen):
        # documented approximation: V update ignores the mask entirely
        d, r = 5, 2
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.1))
        mu_bar = gen.standard_normal(r)
        y = gen.standard_normal(d)
        full = update_dictionary(prior, mu_bar, y, eta=0.7)
        part = update_dictionary(prior, mu_bar, y, eta=0.7,
                                 mask=np.array([1.0, 0, 0, 0, 1.0]))
        np.testing.assert_allclose(part.col_cov, full.col_cov, atol=1e-14)

    def test_rank_mismatch_rejected(self, gen):
        prior = DictionaryPosterior(gen.standard_normal((3, 2)), np.eye(2))
        with pytest.raises(ContractError):
            update_dictionary(prior, np.zeros(3), np.zeros(3), 1.0)

    def test_nonpositive_denominator_rejected(self):
        prior = DictionaryPosterior(np.array([[1.0]]), np.array([[1.0]]))
        with pytest.raises(NumericalError):
            update_dictionary(prior, np.array([1.0]), np.array([0.0]), eta=-2.0)

    def test_non_finite_observation_diverges(self):
        prior = DictionaryPosterior(np.array([[1.0]]), np.array([[1.0]]))
        with pytest.raises(DivergenceError):
            update_dictionary(prior, np.array([1.0]), np.array([np.nan]), 1.0)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 10_000))
    def test_covariance_contracts_and_stays_psd(self, seed):
        gen = rng(seed)
        r = int(gen.integers(1, 5))
        d = int(gen.integers(1, 7))
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.5))
        post = update_dictionary(prior, gen.standard_normal(r),
                                 gen.standard_normal(d),
                                 eta=float(gen.uniform(0.1, 3.0)))
        assert eig_min(post.col_cov) >= -1e-10
        assert eig_min(prior.col_cov - post.col_cov) >= -1e-10


class TestVectorizedKalmanEquivalence:
    """The rank-one update must equal a dense Kalman step on vec(C).

    Column-stacked state c = vec(C), observation y = (mu^T kron I_d) c with
    noise eta I_d, prior covariance V kron I_d. The posterior covariance must
    keep the Kronecker form V' kron I_d.
    """

    def oracle(self, prior, mu_bar, y, eta):
        d, r = prior.mean.shape
        H = np.kron(mu_bar[None, :], np.eye(d))
        c_post, L_post = vectorized_kalman_oracle(
            prior.mean.flatten(order="F"),
            np.kron(prior.col_cov, np.eye(d)),
            H, eta * np.eye(d), y)
        return c_post.reshape((d, r), order="F"), L_post

    def test_single_step_mean_and_kron_factor(self, gen):
        d, r = 5, 3
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.2))
        mu_bar = gen.standard_normal(r)
        y = gen.standard_normal(d)
        eta = 0.8
        post = update_dictionary(prior, mu_bar, y, eta)
        C_ref, L_ref = self.oracle(prior, mu_bar, y, eta)
        np.testing.assert_allclose(post.mean, C_ref, rtol=0, atol=1e-11)
        np.testing.assert_allclose(np.kron(post.col_cov, np.eye(d)), L_ref,
                                   atol=1e-11)

    def test_chained_steps_track_the_oracle(self, gen):
        d, r = 4, 2
        post = DictionaryPosterior(gen.standard_normal((d, r)),
                                   random_spd(gen, r, scale=0.3))
        ref_mean, ref_V = post.mean.copy(), post.col_cov.copy()
        for _ in range(20):
            mu_bar = gen.standard_normal(r)
            y = gen.standard_normal(d)
            eta = float(gen.uniform(0.2, 2.0))
            C_ref, L_ref = self.oracle(
                DictionaryPosterior(ref_mean, ref_V), mu_bar, y, eta)
            post = update_dictionary(post, mu_bar, y, eta)
            ref_mean = C_ref
            # Kronecker factor sits at the (a d, b d) grid of V kron I_d
            ref_V = L_ref[0::d, 0::d].copy()
            rel = np.linalg.norm(post.mean - C_ref) / np.linalg.norm(C_ref)
            assert rel <= 1e-9
            np.testing.assert_allclose(post.col_cov, ref_V, atol=1e-9)


class TestCoefficientUpdate:
    def test_scalar_example(self):
        # C = 1, V = 0, P_bar = 1, R = 1, mu_bar = 0, y = 1:
        # S = 2, gain = 1/2, mu = 0.5, P = 1 - 1/2 = 0.5
        prior = DictionaryPosterior(np.array([[1.0]]), np.zeros((1, 1)))
        post = update_coefficients(prior, np.zeros(1), np.eye(1),
                                   np.array([1.0]), np.eye(1))
        assert post.mean[0] == pytest.approx(0.5)
        assert post.cov[0, 0] == pytest.approx(0.5)

    def test_dictionary_uncertainty_inflates_noise(self):
        # mu_bar = 1, V = 3 adds rho_v = 3: S = 1 + 1 + 3 = 5, gain = 1/5,
        # mu = 1 + (2 - 1)/5 = 1.2, P = 1 - 1/5 = 0.8
        prior = DictionaryPosterior(np.array([[1.0]]), 3.0 * np.eye(1))
        post = update_coefficients(prior, np.ones(1), np.eye(1),
                                   np.array([2.0]), np.eye(1))
        assert post.mean[0] == pytest.approx(1.2)
        assert post.cov[0, 0] == pytest.approx(0.8)

    def test_low_rank_path_matches_dense_path(self, gen):
        d, r = 20, 4
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.1))
        mu_bar = gen.standard_normal(r)
        P_bar = random_spd(gen, r, scale=0.5)
        y = gen.standard_normal(d)
        R = np.diag(gen.uniform(0.5, 2.0, d))
        mask = (gen.uniform(size=d) < 0.8).astype(float)
        mask[:2] = 1.0
        fast = update_coefficients(prior, mu_bar, P_bar, y, R, mask,
                                   r_diagonal=True)
        dense = update_coefficients(prior, mu_bar, P_bar, y, R, mask,
                                    r_diagonal=False)
        np.testing.assert_allclose(fast.mean, dense.mean, rtol=1e-9)
        np.testing.assert_allclose(fast.cov, dense.cov, atol=1e-9)

    def test_zero_p_bar_passes_prediction_through(self, gen):
        d, r = 6, 2
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.1))
        mu_bar = gen.standard_normal(r)
        post = update_coefficients(prior, mu_bar, np.zeros((r, r)),
                                   gen.standard_normal(d), np.eye(d))
        np.testing.assert_allclose(post.mean, mu_bar, atol=1e-14)
        np.testing.assert_allclose(post.cov, np.zeros((r, r)), atol=1e-14)

    def test_masked_equals_row_restricted_dense_update(self, gen):
        d, r = 8, 3
        prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                    random_spd(gen, r, scale=0.1))
        mu_bar = gen.standard_normal(r)
        P_bar = random_spd(gen, r, scale=0.4)
        y = gen.standard_normal(d)
        R = np.diag(gen.uniform(0.5, 2.0, d))
        mask = np.array([1, 1, 0, 1, 0, 0, 1, 1], dtype=float)
        obs = mask.astype(bool)

        masked = update_coefficients(prior, mu_bar, P_bar, y, R, mask)
        # oracle: classic Kalman on the observed sub-block with inflated R
        C_o = prior.mean[obs]
        rho_v = float(mu_bar @ prior.col_cov @ mu_bar)
        S = C_o @ P_bar @ C_o.T + R[np.ix_(obs, obs)] + rho_v * np.eye(obs.sum())
        K = P_bar @ C_o.T @ np.linalg.inv(S)
        mu_ref = mu_bar + K @ (y[obs] - C_o @ mu_bar)
        P_ref = P_bar - K @ C_o @ P_bar
        np.testing.assert_allclose(masked.mean, mu_ref, rtol=1e-10)
        np.testing.assert_allclose(masked.cov, P_ref, atol=1e-10)

    def test_posterior_covariance_psd(self, gen):
        for _ in range(10):
            d, r = 9, 3
            prior = DictionaryPosterior(gen.standard_normal((d, r)),
                                        random_spd(gen, r, scale=0.2))
            post = update_coefficients(prior, gen.standard_normal(r),
                                       random_spd(gen, r),
                                       gen.standard_normal(d), np.eye(d))
            assert eig_min(post.cov) >= -1e-10


class TestFilterStep:
    def make_setup(self, gen, d=6, r=3, q=0.05, p0=0.2, theta=None):
        if theta is None:
            theta = np.linspace(0.05, 0.15, r)
        noise = make_noise(gen, d, r, q=q, p0=p0, v0=0.3)
        model = SubspaceModel.cosine_periodic(theta)
        return initial_state(noise), model

    def test_reproduces_manual_pipeline(self, gen):
        state, model = self.make_setup(gen)
        y = gen.standard_normal(6)
        new_state, entry = filter_step(state, model, y)

        mu_bar, P_bar, _ = predict(state, model)
        eta = compute_eta(state.dictionary.mean, P_bar, state.noise.R)
        ref_dict = update_dictionary(state.dictionary, mu_bar, y, eta)
        ref_coef = update_coefficients(state.dictionary, mu_bar, P_bar, y,
                                       state.noise.R)
        np.testing.assert_array_equal(new_state.dictionary.mean, ref_dict.mean)
        np.testing.assert_array_equal(new_state.coef.mean, ref_coef.mean)
        np.testing.assert_array_equal(new_state.coef.cov, ref_coef.cov)
        assert entry.eta == pytest.approx(eta)
        assert new_state.k == 1

    def test_both_updates_read_previous_dictionary(self, gen):
        # swapping the update order inside the step must change nothing
        state, model = self.make_setup(gen)
        y = gen.standard_normal(6)
        new_state, _ = filter_step(state, model, y)
        mu_bar, P_bar, _ = predict(state, model)
        coef_from_old = update_coefficients(state.dictionary, mu_bar, P_bar,
                                            y, state.noise.R)
        coef_from_new = update_coefficients(new_state.dictionary, mu_bar,
                                            P_bar, y, state.noise.R)
        np.testing.assert_array_equal(new_state.coef.mean, coef_from_old.mean)
        assert not np.allclose(coef_from_old.mean, coef_from_new.mean)

    def test_full_mask_equals_no_mask(self, gen):
        state, model = self.make_setup(gen)
        Y = gen.standard_normal((6, 20))
        ones = np.ones_like(Y)
        plain, _ = run_steps(state, model, Y)
        masked, _ = run_steps(state, model, Y, ones)
        np.testing.assert_allclose(masked.dictionary.mean,
                                   plain.dictionary.mean, atol=1e-12)
        np.testing.assert_allclose(masked.dictionary.col_cov,
                                   plain.dictionary.col_cov, atol=1e-12)
        np.testing.assert_allclose(masked.coef.mean, plain.coef.mean,
                                   atol=1e-12)
        np.testing.assert_allclose(masked.coef.cov, plain.coef.cov,
                                   atol=1e-12)

    def test_all_missing_is_pure_propagation(self, gen):
        state, model = self.make_setup(gen)
        y = gen.standard_normal(6)
        new_state, entry = filter_step(state, model, y, np.zeros(6))
        assert new_state.dictionary is state.dictionary
        mu_bar, P_bar, _ = predict(state, model)
        np.testing.assert_array_equal(new_state.coef.mean, mu_bar)
        np.testing.assert_array_equal(new_state.coef.cov, P_bar)
        assert entry.observed_count == 0
        assert entry.nll_increment == 0.0
        assert math.isnan(entry.eta)

    def test_dictionary_covariance_monotone(self, gen):
        state, model = self.make_setup(gen)
        Y = gen.standard_normal((6, 30))
        prev = state.dictionary.col_cov
        for j in range(Y.shape[1]):
            state, _ = filter_step(state, model, Y[:, j])
            cur = state.dictionary.col_cov
            assert eig_min(prev - cur) >= -1e-10
            prev = cur

    def test_trace_entry_contents(self, gen):
        state, model = self.make_setup(gen)
        y = gen.standard_normal(6)
        mu_bar, P_bar, _ = predict(state, model)
        rho_v = float(mu_bar @ state.dictionary.col_cov @ mu_bar)
        eta = compute_eta(state.dictionary.mean, P_bar, state.noise.R)
        resid = y - state.dictionary.mean @ mu_bar
        _, entry = filter_step(state, model, y)
        assert entry.k == 1
        assert entry.observed_count == 6
        assert entry.innovation_norm == pytest.approx(np.linalg.norm(resid))
        assert entry.nll_increment == pytest.approx(
            gaussian_nll_increment(resid, rho_v + eta))
        assert entry.omega is None and entry.phi is None


class TestRunFilter:
    def test_total_nll_is_sum_of_increments(self, gen):
        noise = make_noise(gen, d=5, r=2, q=0.05, p0=0.2)
        model = SubspaceModel.cosine_periodic(np.array([0.05, 0.1]))
        Y = gen.standard_normal((5, 25))
        data = psmf.DataMatrix(Y, np.ones_like(Y))
        run = run_filter(initial_state(noise), model, data)
        assert run.total_nll == pytest.approx(
            sum(e.nll_increment for e in run.entries))
        assert run.coef_means.shape == (2, 25)
        assert run.predictive_mean.shape == (5, 25)
        assert run.predictive_var.shape == (5, 25)
        assert np.all(run.predictive_var > 0)

    def test_matches_manual_loop(self, gen):
        noise = make_noise(gen, d=4, r=2, q=0.02, p0=0.1)
        model = SubspaceModel.random_walk(2)
        Y = gen.standard_normal((4, 12))
        run = run_filter(initial_state(noise), model, psmf.DataMatrix(Y, np.ones_like(Y)))
        state, entries = run_steps(initial_state(noise), model, Y)
        np.testing.assert_array_equal(run.state.dictionary.mean,
                                      state.dictionary.mean)
        np.testing.assert_array_equal(run.coef_means[:, -1], state.coef.mean)
        assert [e.k for e in run.entries] == [e.k for e in entries]


class TestScaleCoupling:
    """Scaling (y, C0) by alpha and (V0, R) by alpha^2 with Q and P0 held
    fixed leaves the coefficient posterior invariant and scales the
    dictionary mean by alpha, its covariance and eta by alpha^2."""

    def run_pair(self, gen, alpha, q, p0):
        d, r = 5, 2
        C0 = gen.standard_normal((d, r))
        Y = gen.standard_normal((d, 15))
        model = SubspaceModel.cosine_periodic(np.array([0.07, 0.12]))
        mu0 = gen.standard_normal(r)

        base = psmf.NoiseConfig(Q=q * np.eye(r), R=np.eye(d),
                                P0=p0 * np.eye(r), V0=0.5 * np.eye(r),
                                mu0=mu0, C0=C0)
        scaled = psmf.NoiseConfig(Q=q * np.eye(r), R=alpha ** 2 * np.eye(d),
                                  P0=p0 * np.eye(r),
                                  V0=alpha ** 2 * 0.5 * np.eye(r),
                                  mu0=mu0, C0=alpha * C0)
        s1, e1 = run_steps(initial_state(base), model, Y)
        s2, e2 = run_steps(initial_state(scaled), model, alpha * Y)
        return s1, e1, s2, e2

    @pytest.mark.parametrize("q,p0", [(0.0, 0.0), (0.01, 0.5)])
    def test_equivariance(self, gen, q, p0):
        alpha = 3.7
        s1, e1, s2, e2 = self.run_pair(gen, alpha, q, p0)
        np.testing.assert_allclose(s2.coef.mean, s1.coef.mean, rtol=1e-9,
                                   atol=1e-12)
        np.testing.assert_allclose(s2.coef.cov, s1.coef.cov, atol=1e-10)
        np.testing.assert_allclose(s2.dictionary.mean,
                                   alpha * s1.dictionary.mean, rtol=1e-9)
        np.testing.assert_allclose(s2.dictionary.col_cov,
                                   alpha ** 2 * s1.dictionary.col_cov,
                                   rtol=1e-9, atol=1e-12)
        for a, b in zip(e1, e2):
            assert b.eta == pytest.approx(alpha ** 2 * a.eta, rel=1e-9)


class TestReconstructAndImpute:
    def test_variance_matches_dense_innovation_diagonal(self, gen):
        noise = make_noise(gen, d=6, r=2, q=0.1, p0=0.3, v0=0.4)
        model = SubspaceModel.cosine_periodic(np.array([0.05, 0.2]))
        state = initial_state(noise)
        state, _ = filter_step(state, model, gen.standard_normal(6))

        mu_bar, P_bar, _ = predict(state, model)
        C = state.dictionary.mean
        rho_v = float(mu_bar @ state.dictionary.col_cov @ mu_bar)
        S = C @ P_bar @ C.T + state.noise.R + rho_v * np.eye(6)
        _, yvar = reconstruct_and_impute(state, model, gen.standard_normal(6))
        np.testing.assert_allclose(yvar, np.diag(S), rtol=1e-12)

    def test_observed_pass_through_missing_predicted(self, gen):
        noise = make_noise(gen, d=4, r=2, q=0.1, p0=0.3)
        model = SubspaceModel.random_walk(2)
        state = initial_state(noise)
        state, _ = filter_step(state, model, gen.standard_normal(4))
        y = gen.standard_normal(4)
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        out, _ = reconstruct_and_impute(state, model, y, mask)
        mu_bar, _, _ = predict(state, model)
        pred = state.dictionary.mean @ mu_bar
        np.testing.assert_array_equal(out[[0, 2]], y[[0, 2]])
        np.testing.assert_allclose(out[[1, 3]], pred[[1, 3]], atol=1e-14)


class TestForecast:
    def test_zero_steps(self, gen):
        noise = make_noise(gen, d=3, r=2, q=0.1)
        state = initial_state(noise)
        Yhat, Yvar = forecast(state, SubspaceModel.random_walk(2), 0)
        assert Yhat.shape == (3, 0) and Yvar.shape == (3, 0)

    def test_negative_steps_rejected(self, gen):
        noise = make_noise(gen, d=3, r=2)
        with pytest.raises(ContractError):
            forecast(initial_state(noise), SubspaceModel.random_walk(2), -1)

    def test_deterministic_linear_growth(self, gen):
        # A = 2, no noise: forecast j steps out doubles j times
        noise = make_noise(gen, d=3, r=1, q=0.0, p0=0.0, v0=0.0,
                           mu0=np.ones(1))
        model = SubspaceModel.linear(A=np.array([[2.0]]))
        state = initial_state(noise)
        Yhat, Yvar = forecast(state, model, 5)
        base = noise.C0[:, 0]
        for j in range(5):
            np.testing.assert_allclose(Yhat[:, j], base * 2.0 ** (j + 1),
                                       rtol=1e-12)
        np.testing.assert_allclose(Yvar, np.ones((3, 5)), atol=1e-14)

    def test_equals_all_missing_filtering(self, gen):
        # rolling prediction must match a filter fed fully masked columns
        noise = make_noise(gen, d=5, r=2, q=0.2, p0=0.4, v0=0.3,
                           mu0=gen.standard_normal(2))
        model = SubspaceModel.cosine_periodic(np.array([0.1, 0.3]))
        state = initial_state(noise)
        state, _ = filter_step(state, model, gen.standard_normal(5))

        Yhat, Yvar = forecast(state, model, 7)
        roll = state
        for j in range(7):
            roll, entry = filter_step(roll, model, np.zeros(5), np.zeros(5))
            np.testing.assert_allclose(entry.predictive_mean, Yhat[:, j],
                                       atol=1e-12)
            np.testing.assert_allclose(entry.predictive_var, Yvar[:, j],
                                       atol=1e-12)

    def test_uncertainty_accumulates(self, gen):
        noise = make_noise(gen, d=4, r=2, q=0.5, p0=0.1)
        model = SubspaceModel.random_walk(2)
        state = initial_state(noise)
        state, _ = filter_step(state, model, gen.standard_normal(4))
        _, Yvar = forecast(state, model, 10)
        assert np.all(np.diff(Yvar, axis=1) > 0)


class TestNllIncrement:
    def test_zero_residual_is_pure_log_volume(self):
        val = gaussian_nll_increment(np.zeros(3), 2.0)
        assert val == pytest.approx(1.5 * (math.log(2 * math.pi) + math.log(2.0)))

    def test_quadratic_term(self):
        val = gaussian_nll_increment(np.array([3.0]), 1.0)
        assert val == pytest.approx(0.5 * (math.log(2 * math.pi) + 9.0))
