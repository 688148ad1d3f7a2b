"""Exact references for verification: Kalman filter/smoother log-likelihood
for the linear-mode model, and central finite-difference gradients.

The filter handles per-step missingness by subsetting the observation model
to the mask-1 rows; a fully masked step is a predict-only update. Covariance
updates use the Joseph form and are symmetrized each step so the dominance
tests (ELBO <= exact log-likelihood) can run at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import NumericError, Tensor
from .model import ModelParams

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LGSSM:
    """z_t = A z_{t-1} + B s + b + w,  x_t = C z_t + d + v, diagonal noise.

    Q/R are the diagonal process/observation variances; z starts from
    N(z0_mean, z0_cov) (a zero covariance pins the chain to z0 exactly).
    """

    A: np.ndarray        # (d, d)
    B: np.ndarray        # (d, ds)
    b: np.ndarray        # (d,)
    C: np.ndarray        # (M, d)
    d: np.ndarray        # (M,)
    Q: np.ndarray        # (d,) diagonal variances
    R: np.ndarray        # (M,) diagonal variances
    z0_mean: np.ndarray  # (d,)
    z0_cov: np.ndarray = field(default=None)  # (d, d); zeros if omitted

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.z0_mean = np.asarray(self.z0_mean, dtype=np.float64)
        if self.z0_cov is None:
            self.z0_cov = np.zeros((self.A.shape[0], self.A.shape[0]))
        else:
            self.z0_cov = np.asarray(self.z0_cov, dtype=np.float64)
        if np.any(self.Q <= 0) or np.any(self.R <= 0):
            raise ValueError("process/observation variances must be positive")

    @property
    def latent_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]


def lgssm_from_linear_model(params: ModelParams) -> LGSSM:
    """Read the exact LGSSM off a linear-mode model.

    Transition mean W [z; s] + b splits into A (z block), B (s block), b;
    the emission linear head gives C, d; the constant variance heads give
    Q and R; z0 seeds the chain deterministically.
    """
    if not params.linear_mode:
        raise ValueError("lgssm_from_linear_model requires a linear-mode model")
    dz = params.dims.latent_dim
    w_t = params.transition.w_mu_lin.data
    w_e = params.emission.w_mu_lin.data

    def head_var(b_sigma: Tensor) -> np.ndarray:
        x = b_sigma.data
        sd = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) + params.var_floor
        return sd * sd

    return LGSSM(
        A=w_t[:, :dz].copy(),
        B=w_t[:, dz:].copy(),
        b=params.transition.b_mu_lin.data.copy(),
        C=w_e.copy(),
        d=params.emission.b_mu_lin.data.copy(),
        Q=head_var(params.transition.b_sigma),
        R=head_var(params.emission.b_sigma),
        z0_mean=params.z0.data.copy(),
        z0_cov=np.zeros((dz, dz)),
    )


def kalman_filter(
    m: LGSSM,
    x: np.ndarray,
    mask: np.ndarray,
    s: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Run the filter over (T, M) observations with a (T, M) 0/1 mask.

    Only mask-1 entries are observed; a fully masked step contributes no
    likelihood and only advances the dynamics. Returns
    (loglik, filt_means (T, d), filt_covs (T, d, d), pred_means, pred_covs).
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask)
    T, _ = x.shape
    d = m.latent_dim
    drive = m.b.copy()
    if s is not None:
        drive = drive + m.B @ np.asarray(s, dtype=np.float64)
    eye = np.eye(d)

    mu = m.z0_mean.copy()
    P = m.z0_cov.copy()
    ll = 0.0
    filt_means = np.empty((T, d))
    filt_covs = np.empty((T, d, d))
    pred_means = np.empty((T, d))
    pred_covs = np.empty((T, d, d))

    for t in range(T):
        mu = m.A @ mu + drive
        P = m.A @ P @ m.A.T + np.diag(m.Q)
        P = 0.5 * (P + P.T)
        pred_means[t] = mu
        pred_covs[t] = P

        obs = np.flatnonzero(mask[t])
        if obs.size:
            C_o = m.C[obs]
            R_o = m.R[obs]
            resid = x[t, obs] - (C_o @ mu + m.d[obs])
            S = C_o @ P @ C_o.T + np.diag(R_o)
            S = 0.5 * (S + S.T)
            try:
                chol = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as err:
                raise NumericError(f"innovation covariance not PD at step {t}") from err
            alpha = np.linalg.solve(chol, resid)
            ll += -0.5 * (obs.size * LOG_2PI + alpha @ alpha) - np.log(np.diag(chol)).sum()
            K = np.linalg.solve(S, C_o @ P).T  # P C' S^-1 via symmetry of P, S
            mu = mu + K @ resid
            ikc = eye - K @ C_o
            P = ikc @ P @ ikc.T + K @ np.diag(R_o) @ K.T  # Joseph form
            P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(mu)):
            raise NumericError(f"filter diverged at step {t}")
        filt_means[t] = mu
        filt_covs[t] = P

    return float(ll), filt_means, filt_covs, pred_means, pred_covs


def kalman_loglik(
    m: LGSSM,
    x: np.ndarray,
    mask: np.ndarray,
    s: np.ndarray | None = None,
) -> float:
    """Exact log p(x at mask-1 cells) under the LGSSM."""
    ll, *_ = kalman_filter(m, x, mask, s)
    return ll


def kalman_smooth(
    m: LGSSM,
    x: np.ndarray,
    mask: np.ndarray,
    s: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rauch-Tung-Striebel smoothed means/covariances, (T, d) and (T, d, d)."""
    _, fm, fP, pm, pP = kalman_filter(m, x, mask, s)
    T, d = fm.shape
    sm = np.empty_like(fm)
    sP = np.empty_like(fP)
    sm[-1] = fm[-1]
    sP[-1] = fP[-1]
    for t in range(T - 2, -1, -1):
        G = fP[t] @ m.A.T @ np.linalg.pinv(pP[t + 1])
        sm[t] = fm[t] + G @ (sm[t + 1] - pm[t + 1])
        sP[t] = fP[t] + G @ (sP[t + 1] - pP[t + 1]) @ G.T
        sP[t] = 0.5 * (sP[t] + sP[t].T)
    return sm, sP


def fd_gradient(
    loss_fn: Callable[[], float],
    named_params: list[tuple[str, Tensor]],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences (f(t+h) - f(t-h)) / 2h per scalar parameter.

    loss_fn must be deterministic under repeated calls (fixed seeds); a
    reproducibility probe runs first and raises if two evaluations differ.
    """
    f0 = loss_fn()
    f1 = loss_fn()
    if f0 != f1:
        raise RuntimeError(
            f"loss is not reproducible at fixed parameters ({f0!r} != {f1!r}); "
            "check for seed leakage"
        )
    grads: dict[str, np.ndarray] = {}
    for name, p in named_params:
        if not isinstance(p.data, np.ndarray):  # guard against 0-d scalar decay
            p.data = np.asarray(p.data, dtype=np.float64)
        flat = p.data.flat  # writes through regardless of memory layout
        g = np.empty(p.data.size)
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(p.data.shape)
    return grads
