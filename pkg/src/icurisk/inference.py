"""Structured posterior: backward ReLU recurrence over [m_t; x_t], a combiner
network fusing (z_{t-1}, s, h_t), and sequential reparameterized sampling.

The encoder runs from t = T down to 1 with h_{T+1} = 0, so q(z_t | .) sees
only the present-and-future measurements x_{t:T}, m_{t:T} — masks included,
values as imputed. The batched rollout is the shared engine for training,
ELBO estimation, and scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiagGaussian, Tensor
from .model import ModelParams, PosteriorParams


@dataclass
class LatentPath:
    """One sampled posterior trajectory with its per-step Gaussians.

    The reconstruction identity z[t] = q_means[t] + q_stddevs[t] * eps[t]
    holds exactly (bitwise) by construction.
    """

    z: np.ndarray          # (T, dz)
    q_means: np.ndarray    # (T, dz)
    q_stddevs: np.ndarray  # (T, dz)
    eps: np.ndarray        # (T, dz)

    @property
    def T(self) -> int:
        return self.z.shape[0]


def encode_backward(x: np.ndarray, m: np.ndarray, p: PosteriorParams) -> list[Tensor]:
    """Backward encoder states h_1..h_T for one batch.

    x, m are (B, T, M) arrays (a single record may pass (T, M); it is
    treated as B = 1). Returns a list of T tensors of shape (B, rnn_dim):
    h_t = ReLU(W [m_t; x_t] + U h_{t+1} + b), boundary h_{T+1} = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
        m = m[None]
    if x.shape != m.shape:
        raise ValueError(f"x shape {x.shape} != mask shape {m.shape}")
    batch, T, _ = x.shape
    r = p.b_rnn.data.shape[0]
    h_next = Tensor(np.zeros((batch, r)))
    states: list[Tensor] = [None] * T  # type: ignore[list-item]
    for t in range(T - 1, -1, -1):
        inp = Tensor(np.concatenate([m[:, t, :], x[:, t, :]], axis=1))
        pre = ad.affine(inp, p.w_rnn_in, p.b_rnn) + ad.affine(h_next, p.u_rnn)
        h_next = ad.relu(pre)
        states[t] = h_next
    return states


def combine(
    z_prev: Tensor,
    s: Tensor,
    h_t: Tensor,
    p: PosteriorParams,
    var_floor: float,
) -> DiagGaussian:
    """q(z_t | z_{t-1}, s, x_{t:T}, m_{t:T}) from the combiner network.

    c_t = W_c [z_{t-1}; s] + b_c; h~ = 0.5 tanh(c_t + h_t);
    mu = W_mu h~ + b_mu; sigma = softplus(W_sigma h~ + b_sigma) + floor.
    """
    c_t = ad.affine(ad.concat([z_prev, s], axis=1), p.w_comb, p.b_comb)
    h_tilde = 0.5 * ad.tanh(c_t + h_t)
    mu = ad.affine(h_tilde, p.w_post_mu, p.b_post_mu)
    sigma = ad.softplus(ad.affine(h_tilde, p.w_post_sigma, p.b_post_sigma)) + var_floor
    return DiagGaussian(mu, sigma)


def posterior_rollout(
    x: np.ndarray,
    m: np.ndarray,
    s: np.ndarray,
    params: ModelParams,
    eps: np.ndarray,
) -> tuple[list[Tensor], list[DiagGaussian]]:
    """Sample z_1..z_T for a batch through the posterior chain.

    x, m: (B, T, M); s: (B, ds); eps: (B, T, dz) standard-normal draws.
    Returns (z list of T (B, dz) tensors, q list of the per-step Gaussians).
    Gradients flow through both posterior heads (full reparameterization).
    """
    x = np.asarray(x, dtype=np.float64)
    batch, T, _ = x.shape
    h = encode_backward(x, m, params.posterior)
    s_t = Tensor(np.asarray(s, dtype=np.float64))
    z_prev = ad.tile_rows(params.z0, batch)
    z_list: list[Tensor] = []
    q_list: list[DiagGaussian] = []
    for t in range(T):
        q_t = combine(z_prev, s_t, h[t], params.posterior, params.var_floor)
        z_t = ad.reparam_sample(q_t, np.ascontiguousarray(eps[:, t, :]))
        z_list.append(z_t)
        q_list.append(q_t)
        z_prev = z_t
    return z_list, q_list


def sample_posterior_path(record, params: ModelParams, seed: int) -> LatentPath:
    """Draw one latent trajectory for a single (preprocessed) record."""
    dz = params.dims.latent_dim
    T = record.T
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((1, T, dz))
    with ad.no_grad():
        z_list, q_list = posterior_rollout(
            record.x[None], record.m[None], record.s[None], params, eps
        )
    return LatentPath(
        z=np.stack([z.data[0] for z in z_list]),
        q_means=np.stack([q.mean.data[0] for q in q_list]),
        q_stddevs=np.stack([np.broadcast_to(q.stddev.data, q.mean.data.shape)[0] for q in q_list]),
        eps=eps[0],
    )
