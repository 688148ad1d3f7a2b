"""Posterior contracts: backward-encoder causality, combiner closed forms,
reparameterized path sampling, and smoother agreement after ELBO training."""

import math

import numpy as np
import pytest

from icurisk import autodiff as ad
from icurisk.autodiff import Tensor
from icurisk.data import PatientRecord
from icurisk.inference import combine, encode_backward, sample_posterior_path
from icurisk.model import Dims, init_params
from icurisk.oracle import kalman_smooth, lgssm_from_linear_model

DIMS = Dims(latent_dim=4, static_dim=3, feature_dim=5, transition_hidden=6,
            emission_hidden=6, rnn_dim=5, attention_dim=4, predictor_hidden=3)


def _h_stack(states):
    return np.stack([h.data for h in states], axis=1)  # (B, T, r)


class TestEncodeBackward:
    def test_zero_params_give_zero_states(self, rng):
        params = init_params(DIMS, seed=0)
        for p in (params.posterior.w_rnn_in, params.posterior.u_rnn, params.posterior.b_rnn):
            p.data = np.zeros_like(p.data)
        x = rng.standard_normal((2, 6, 5))
        m = np.ones((2, 6, 5))
        with ad.no_grad():
            states = encode_backward(x, m, params.posterior)
        assert np.all(_h_stack(states) == 0.0)

    def test_input_decoupled_chain_with_positive_bias(self, rng):
        params = init_params(DIMS, seed=1)
        params.posterior.w_rnn_in.data = np.zeros_like(params.posterior.w_rnn_in.data)
        params.posterior.b_rnn.data = np.abs(rng.standard_normal(5)) + 0.1
        x1 = rng.standard_normal((1, 6, 5))
        x2 = rng.standard_normal((1, 6, 5))
        with ad.no_grad():
            h1 = _h_stack(encode_backward(x1, np.ones_like(x1), params.posterior))
            h2 = _h_stack(encode_backward(x2, np.ones_like(x2), params.posterior))
        np.testing.assert_array_equal(h1, h2)
        # the chain h_t = ReLU(b + U h_{t+1}) is constant in x by construction
        u, b = params.posterior.u_rnn.data, params.posterior.b_rnn.data
        expect = np.zeros(5)
        expected_rows = []
        for _ in range(6):
            expect = np.maximum(b + u @ expect, 0.0)
            expected_rows.append(expect.copy())
        np.testing.assert_allclose(h1[0], np.stack(expected_rows[::-1]), atol=1e-12)

    def test_backward_causality(self, rng):
        params = init_params(DIMS, seed=2)
        # positive recurrence bias keeps units alive so perturbations propagate
        params.posterior.b_rnn.data = np.full(5, 0.5)
        x = rng.standard_normal((1, 8, 5))
        m = (rng.random((1, 8, 5)) > 0.3).astype(float)
        x_late = x.copy()
        x_late[0, -1, :] += 3.0  # perturb the final step
        x_early = x.copy()
        x_early[0, 0, :] += 3.0  # perturb the first step
        with ad.no_grad():
            h = _h_stack(encode_backward(x, m, params.posterior))
            h_late = _h_stack(encode_backward(x_late, m, params.posterior))
            h_early = _h_stack(encode_backward(x_early, m, params.posterior))
        assert np.any(h_late[0, 0] != h[0, 0])          # h_1 sees x_T
        np.testing.assert_array_equal(h_early[0, -1], h[0, -1])  # h_T blind to x_1
        # bitwise: every state from t onward ignores earlier steps
        for t in range(1, 8):
            np.testing.assert_array_equal(h_early[0, t], h[0, t])

    def test_mask_sensitivity(self, rng):
        params = init_params(DIMS, seed=3)
        x = rng.standard_normal((1, 4, 5))
        m = np.ones((1, 4, 5))
        m_flipped = m.copy()
        m_flipped[0, 2, 1] = 0.0
        with ad.no_grad():
            h = _h_stack(encode_backward(x, m, params.posterior))
            h_flip = _h_stack(encode_backward(x, m_flipped, params.posterior))
        assert np.any(h != h_flip)

    def test_shape_mismatch_rejected(self, rng):
        params = init_params(DIMS, seed=4)
        with pytest.raises(ValueError):
            encode_backward(rng.standard_normal((1, 4, 5)),
                            np.ones((1, 3, 5)), params.posterior)


class TestCombine:
    def test_zero_preactivation_closed_form(self, rng):
        params = init_params(DIMS, seed=5)
        pp = params.posterior
        pp.w_comb.data = np.zeros_like(pp.w_comb.data)
        pp.b_comb.data = np.zeros_like(pp.b_comb.data)
        pp.b_post_mu.data = rng.standard_normal(4)
        pp.b_post_sigma.data = rng.standard_normal(4)
        with ad.no_grad():
            q = combine(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3))),
                        Tensor(np.zeros((2, 5))), pp, 1e-3)
        np.testing.assert_allclose(q.mean.data, np.tile(pp.b_post_mu.data, (2, 1)),
                                   atol=1e-15)
        expected = np.log1p(np.exp(-np.abs(pp.b_post_sigma.data)))
        expected += np.maximum(pp.b_post_sigma.data, 0.0)
        np.testing.assert_allclose(q.stddev.data, np.tile(expected + 1e-3, (2, 1)),
                                   atol=1e-12)

    def test_squashed_state_bound(self, rng):
        # |0.5 tanh| <= 0.5 limits how far mu can travel per unit weight
        params = init_params(DIMS, seed=6)
        pp = params.posterior
        pp.w_post_mu.data = np.eye(4, 5)
        pp.b_post_mu.data = np.zeros(4)
        big = Tensor(1e3 * rng.standard_normal((3, 5)))
        with ad.no_grad():
            q = combine(Tensor(rng.standard_normal((3, 4))),
                        Tensor(rng.standard_normal((3, 3))), big, pp, 1e-4)
        assert np.all(np.abs(q.mean.data) <= 0.5 + 1e-12)

    def test_stddev_floor(self, rng):
        params = init_params(DIMS, seed=7)
        with ad.no_grad():
            q = combine(Tensor(rng.standard_normal((4, 4))),
                        Tensor(rng.standard_normal((4, 3))),
                        Tensor(rng.standard_normal((4, 5))), params.posterior, 0.02)
        assert np.all(q.stddev.data >= 0.02)


def _record(rng, T=7):
    x = rng.standard_normal((T, 5))
    m = (rng.random((T, 5)) > 0.3).astype(float)
    return PatientRecord("r0", rng.standard_normal(3), x, m, y=0)


class TestSamplePosteriorPath:
    def test_fixed_seed_identical(self, rng):
        params = init_params(DIMS, seed=8)
        rec = _record(rng)
        a = sample_posterior_path(rec, params, seed=5)
        b = sample_posterior_path(rec, params, seed=5)
        np.testing.assert_array_equal(a.z, b.z)
        np.testing.assert_array_equal(a.eps, b.eps)

    def test_reconstruction_identity_exact(self, rng):
        params = init_params(DIMS, seed=9)
        rec = _record(rng)
        path = sample_posterior_path(rec, params, seed=6)
        np.testing.assert_array_equal(path.z, path.q_means + path.q_stddevs * path.eps)

    def test_zero_noise_is_mean_recursion(self, rng):
        from icurisk.inference import posterior_rollout

        params = init_params(DIMS, seed=10)
        rec = _record(rng)
        eps = np.zeros((1, rec.T, 4))
        with ad.no_grad():
            z_list, q_list = posterior_rollout(rec.x[None], rec.m[None],
                                               rec.s[None], params, eps)
            # forcing eps = 0 collapses sampling onto the mean recursion:
            # each z_t equals q_t's mean, and q_{t+1} is conditioned on it
            for z_t, q_t in zip(z_list, q_list):
                np.testing.assert_array_equal(z_t.data, q_t.mean.data)
            z_prev = Tensor(params.z0.data[None])
            h = encode_backward(rec.x[None], rec.m[None], params.posterior)
            for t, q_t in enumerate(q_list):
                q_manual = combine(z_prev, Tensor(rec.s[None]), h[t],
                                   params.posterior, params.var_floor)
                np.testing.assert_array_equal(q_manual.mean.data, q_t.mean.data)
                z_prev = q_manual.mean

    def test_posterior_blind_to_past_given_same_z_prev(self, rng):
        # flipping x_1 must not change q_t for t >= 2 when z_{t-1} is held fixed
        params = init_params(DIMS, seed=11)
        rec = _record(rng, T=6)
        x2 = rec.x.copy()
        x2[0] += 5.0
        rec2 = PatientRecord("r1", rec.s, x2, rec.m, y=0)
        a = sample_posterior_path(rec, params, seed=3)
        b = sample_posterior_path(rec2, params, seed=3)
        # same eps; q_1 differs (sees x_1), and the difference propagates only
        # through the sampled z chain. Replay record 2 pinning z_prev to
        # record 1's samples: q_t must then match record 1 bitwise.
        from icurisk.inference import encode_backward as enc

        with ad.no_grad():
            h2 = enc(rec2.x[None], rec2.m[None], params.posterior)
            for t in range(1, 6):
                z_prev = Tensor(a.z[t - 1][None])
                q = combine(z_prev, Tensor(rec.s[None]), h2[t], params.posterior,
                            params.var_floor)
                np.testing.assert_array_equal(q.mean.data[0], a.q_means[t])
                np.testing.assert_array_equal(
                    np.broadcast_to(q.stddev.data, q.mean.data.shape)[0], a.q_stddevs[t]
                )


class TestSmootherAgreement:
    def test_trained_posterior_tracks_kalman_smoother(self, trained_linear, linear_cohort):
        _, records = linear_cohort
        held_out = records[600:650]
        lgssm = lgssm_from_linear_model(trained_linear)
        pooled_q, pooled_smooth = [], []
        for i, rec in enumerate(held_out):
            path = sample_posterior_path(rec, trained_linear, seed=900 + i)
            smooth_means, _ = kalman_smooth(lgssm, rec.x, rec.m, s=rec.s)
            pooled_q.append(path.q_means.ravel())
            pooled_smooth.append(smooth_means.ravel())
        q = np.concatenate(pooled_q)
        sm = np.concatenate(pooled_smooth)
        corr = np.corrcoef(q, sm)[0, 1]
        assert corr > 0.9, f"posterior/smoother correlation {corr:.3f}"
