"""Generative networks: gated transition, gated emission, attention pooling
over the latent path, and the mortality predictor head.

All forward functions are batched: latent/static inputs are (B, d) tensors
and outputs are (B, .) tensors, so one call serves a whole mini-batch or a
whole bundle of Monte-Carlo paths. `linear_mode` pins the gates to 0 and the
variance heads to their bias-only constants, which turns the model into an
exact linear-Gaussian state-space model (the oracle module exploits this).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DiagGaussian, Tensor


@dataclass(frozen=True)
class Dims:
    """Layer widths. Defaults are the tuning-range midpoints."""

    latent_dim: int = 16
    static_dim: int = 7
    feature_dim: int = 12
    transition_hidden: int = 64
    emission_hidden: int = 32
    rnn_dim: int = 16
    attention_dim: int = 24
    predictor_hidden: int = 4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")


@dataclass
class TransitionParams:
    """p(z_t | z_{t-1}, s): gated mix of a linear and a two-layer mean."""

    w_gate_hidden: Tensor
    b_gate_hidden: Tensor
    w_gate: Tensor
    b_gate: Tensor
    w_mu_nl_hidden: Tensor
    b_mu_nl_hidden: Tensor
    w_mu_nl: Tensor
    b_mu_nl: Tensor
    w_mu_lin: Tensor
    b_mu_lin: Tensor
    w_sigma: Tensor
    b_sigma: Tensor


@dataclass
class EmissionParams:
    """p(x_t | z_t): same gated structure, per-feature Gaussians."""

    w_gate_hidden: Tensor
    b_gate_hidden: Tensor
    w_gate: Tensor
    b_gate: Tensor
    w_mu_nl_hidden: Tensor
    b_mu_nl_hidden: Tensor
    w_mu_nl: Tensor
    b_mu_nl: Tensor
    w_mu_lin: Tensor
    b_mu_lin: Tensor
    w_sigma: Tensor
    b_sigma: Tensor


@dataclass
class AttentionParams:
    """Keys are a projection of each latent; scores are scaled cosines."""

    w_proj: Tensor
    b_proj: Tensor
    v: Tensor
    zeta: Tensor


@dataclass
class PredictorParams:
    w_hidden: Tensor
    b_hidden: Tensor
    w_out: Tensor
    b_out: Tensor


@dataclass
class PosteriorParams:
    """Backward recurrence over [m_t; x_t] plus the combiner heads."""

    w_rnn_in: Tensor
    u_rnn: Tensor
    b_rnn: Tensor
    w_comb: Tensor
    b_comb: Tensor
    w_post_mu: Tensor
    b_post_mu: Tensor
    w_post_sigma: Tensor
    b_post_sigma: Tensor


@dataclass
class ModelParams:
    dims: Dims
    transition: TransitionParams
    emission: EmissionParams
    attention: AttentionParams
    predictor: PredictorParams
    posterior: PosteriorParams
    z0: Tensor
    var_floor: float = 1e-4
    linear_mode: bool = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in a fixed, deterministic order."""
        out: list[tuple[str, Tensor]] = []
        for group_name in ("transition", "emission", "attention", "predictor", "posterior"):
            group = getattr(self, group_name)
            for f in fields(group):
                out.append((f"{group_name}.{f.name}", getattr(group, f.name)))
        out.append(("z0", self.z0))
        return out

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def copy(self) -> "ModelParams":
        """Deep copy of all parameter values (fresh leaf tensors)."""
        def clone_group(group):
            kwargs = {f.name: ad.parameter(getattr(group, f.name).data.copy()) for f in fields(group)}
            return type(group)(**kwargs)

        return ModelParams(
            dims=self.dims,
            transition=clone_group(self.transition),
            emission=clone_group(self.emission),
            attention=clone_group(self.attention),
            predictor=clone_group(self.predictor),
            posterior=clone_group(self.posterior),
            z0=ad.parameter(self.z0.data.copy()),
            var_floor=self.var_floor,
            linear_mode=self.linear_mode,
        )


def _uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    """Weight matrix from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(in_dim)
    return ad.parameter(rng.uniform(-bound, bound, size=(out_dim, in_dim)))


def _zeros(*shape: int) -> Tensor:
    return ad.parameter(np.zeros(shape))


def init_params(
    dims: Dims,
    seed: int,
    var_floor: float = 1e-4,
    linear_mode: bool = False,
) -> ModelParams:
    """Deterministic initialization: scaled-uniform weights, zero biases,
    zero initial latent, nonzero attention query, unit temperature."""
    rng = np.random.default_rng(seed)
    dz, ds, m = dims.latent_dim, dims.static_dim, dims.feature_dim
    ht, he, r, a, hp = (
        dims.transition_hidden,
        dims.emission_hidden,
        dims.rnn_dim,
        dims.attention_dim,
        dims.predictor_hidden,
    )
    din = dz + ds

    transition = TransitionParams(
        w_gate_hidden=_uniform(rng, ht, din), b_gate_hidden=_zeros(ht),
        w_gate=_uniform(rng, dz, ht), b_gate=_zeros(dz),
        w_mu_nl_hidden=_uniform(rng, ht, din), b_mu_nl_hidden=_zeros(ht),
        w_mu_nl=_uniform(rng, dz, ht), b_mu_nl=_zeros(dz),
        w_mu_lin=_uniform(rng, dz, din), b_mu_lin=_zeros(dz),
        w_sigma=_uniform(rng, dz, dz), b_sigma=_zeros(dz),
    )
    emission = EmissionParams(
        w_gate_hidden=_uniform(rng, he, dz), b_gate_hidden=_zeros(he),
        w_gate=_uniform(rng, m, he), b_gate=_zeros(m),
        w_mu_nl_hidden=_uniform(rng, he, dz), b_mu_nl_hidden=_zeros(he),
        w_mu_nl=_uniform(rng, m, he), b_mu_nl=_zeros(m),
        w_mu_lin=_uniform(rng, m, dz), b_mu_lin=_zeros(m),
        w_sigma=_uniform(rng, m, m), b_sigma=_zeros(m),
    )
    v = rng.uniform(-1.0, 1.0, size=a)
    while not np.any(v):  # pragma: no cover - probability zero, kept for the invariant
        v = rng.uniform(-1.0, 1.0, size=a)
    attention = AttentionParams(
        w_proj=_uniform(rng, a, dz), b_proj=_zeros(a),
        v=ad.parameter(v), zeta=ad.parameter(1.0),
    )
    predictor = PredictorParams(
        w_hidden=_uniform(rng, hp, dz), b_hidden=_zeros(hp),
        w_out=_uniform(rng, 1, hp), b_out=_zeros(1),
    )
    posterior = PosteriorParams(
        w_rnn_in=_uniform(rng, r, 2 * m), u_rnn=_uniform(rng, r, r), b_rnn=_zeros(r),
        w_comb=_uniform(rng, r, din), b_comb=_zeros(r),
        w_post_mu=_uniform(rng, dz, r), b_post_mu=_zeros(dz),
        w_post_sigma=_uniform(rng, dz, r), b_post_sigma=_zeros(dz),
    )
    return ModelParams(
        dims=dims,
        transition=transition,
        emission=emission,
        attention=attention,
        predictor=predictor,
        posterior=posterior,
        z0=_zeros(dz),
        var_floor=float(var_floor),
        linear_mode=linear_mode,
    )


def _gated_gaussian(inp: Tensor, p, var_floor: float, linear_mode: bool) -> DiagGaussian:
    """Shared body of the transition and emission networks.

    mu = g * mu_nl + (1 - g) * mu_lin,  sigma = softplus(W ReLU(mu_nl) + b) + floor.
    linear_mode pins g = 0 and sigma to its bias-only constant, so the mean is
    exactly affine in the input; the skipped branches get zero gradient either way.
    """
    mu_lin = ad.affine(inp, p.w_mu_lin, p.b_mu_lin)
    if linear_mode:
        sigma = ad.softplus(p.b_sigma) + var_floor
        return DiagGaussian(mu_lin, sigma)
    gate_h = ad.relu(ad.affine(inp, p.w_gate_hidden, p.b_gate_hidden))
    gate = ad.sigmoid(ad.affine(gate_h, p.w_gate, p.b_gate))
    mu_nl_h = ad.relu(ad.affine(inp, p.w_mu_nl_hidden, p.b_mu_nl_hidden))
    mu_nl = ad.affine(mu_nl_h, p.w_mu_nl, p.b_mu_nl)
    mu = gate * mu_nl + (1.0 - gate) * mu_lin
    sigma = ad.softplus(ad.affine(ad.relu(mu_nl), p.w_sigma, p.b_sigma)) + var_floor
    return DiagGaussian(mu, sigma)


def transition(
    z_prev: Tensor,
    s: Tensor,
    p: TransitionParams,
    var_floor: float,
    linear_mode: bool = False,
) -> DiagGaussian:
    """Latent transition p(z_t | z_{t-1}, s) on (B, dz) / (B, ds) inputs."""
    return _gated_gaussian(ad.concat([z_prev, s], axis=1), p, var_floor, linear_mode)


def emission(
    z_t: Tensor,
    p: EmissionParams,
    var_floor: float,
    linear_mode: bool = False,
) -> DiagGaussian:
    """Per-feature observation model p(x_t | z_t) on a (B, dz) input."""
    return _gated_gaussian(z_t, p, var_floor, linear_mode)


def attention_aggregate(
    z_path: list[Tensor],
    p: AttentionParams,
) -> tuple[Tensor, Tensor]:
    """Pool a latent path into one summary vector.

    z_path is a list of T (B, dz) tensors. Scores are zeta * cos(v, W z_t + b),
    softmaxed over t; the pooled vector mixes the raw (unprojected) latents.
    Returns (z_tilde (B, dz), gamma (B, T)).
    """
    if not z_path:
        raise ValueError("attention needs at least one latent step")
    scores = []
    for z_t in z_path:
        keys = ad.affine(z_t, p.w_proj, p.b_proj)
        scores.append(ad.cosine_rows(keys, p.v))
    gamma = ad.softmax(ad.stack_cols(scores) * p.zeta, axis=1)
    z_tilde = ad.column(gamma, 0) * z_path[0]
    for t in range(1, len(z_path)):
        z_tilde = z_tilde + ad.column(gamma, t) * z_path[t]
    return z_tilde, gamma


def predict(z_tilde: Tensor, p: PredictorParams) -> Tensor:
    """Mortality probability head: sigmoid over a one-hidden-layer MLP, (B, 1)."""
    hidden = ad.relu(ad.affine(z_tilde, p.w_hidden, p.b_hidden))
    return ad.sigmoid(ad.affine(hidden, p.w_out, p.b_out))


def forward_from_path(z_path: list[Tensor], params: ModelParams) -> Tensor:
    """Attention + predictor over one batch of latent paths -> (B, 1)."""
    z_tilde, _ = attention_aggregate(z_path, params.attention)
    return predict(z_tilde, params.predictor)


def generate_sequence(
    s: np.ndarray,
    T: int,
    params: ModelParams,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral rollout: z_1 ~ p(.|z0, s), z_t ~ p(.|z_{t-1}, s), x_t ~ p(.|z_t).

    Returns (z_path (T, dz), x_path (T, M)) as plain arrays; deterministic
    for a fixed seed.
    """
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    rng = np.random.default_rng(seed)
    dz, m = params.dims.latent_dim, params.dims.feature_dim
    s_row = np.asarray(s, dtype=np.float64).reshape(1, -1)
    z_path = np.empty((T, dz))
    x_path = np.empty((T, m))
    with ad.no_grad():
        s_t = Tensor(s_row)
        z_prev = Tensor(params.z0.data.reshape(1, -1))
        for t in range(T):
            pz = transition(z_prev, s_t, params.transition, params.var_floor, params.linear_mode)
            z = pz.mean.data + pz.stddev.data * rng.standard_normal((1, dz))
            px = emission(Tensor(z), params.emission, params.var_floor, params.linear_mode)
            x = px.mean.data + px.stddev.data * rng.standard_normal((1, m))
            z_path[t] = z[0]
            x_path[t] = x[0]
            z_prev = Tensor(z)
    return z_path, x_path
