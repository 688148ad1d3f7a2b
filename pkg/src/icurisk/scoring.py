"""Monte-Carlo risk scoring: N posterior paths -> N mortality probabilities,
reported as mean plus an empirical percentile confidence interval.

Noise streams are keyed by (seed, truncation length), so a trajectory point
at time T' reproduces a standalone call on the truncated record, and records
scored together share draws (common random numbers) without affecting the
marginal distribution of any single score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import PatientRecord
from .inference import posterior_rollout
from .model import ModelParams, forward_from_path

CI_PERCENTILES = (2.5, 97.5)


@dataclass
class RiskScore:
    """Sampled mortality probabilities with their mean and percentile CI."""

    samples: np.ndarray
    mean: float
    ci_low: float
    ci_high: float
    n: int


def _risk_from_samples(samples: np.ndarray) -> RiskScore:
    mean = float(samples.mean())
    lo, hi = np.percentile(samples, CI_PERCENTILES, method="linear")
    # Percentiles of a heavily skewed sample can exclude the mean; widen so
    # the ci_low <= mean <= ci_high contract always holds.
    return RiskScore(
        samples=samples,
        mean=mean,
        ci_low=min(float(lo), mean),
        ci_high=max(float(hi), mean),
        n=samples.size,
    )


def _path_noise(seed: int, t_prime: int, n: int, dz: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, t_prime)))
    return rng.standard_normal((n, t_prime, dz))


def score_records_at(
    records: list[PatientRecord],
    params: ModelParams,
    N: int,
    seed: int,
) -> list[RiskScore]:
    """Score a group of records that share the same length in one rollout.

    Each record sees the same (N, T, dz) noise draws; rows are laid out
    sample-major so sample k of record j is row k * len(records) + j.
    """
    if not records:
        return []
    T = records[0].T
    if any(r.T != T for r in records):
        raise ValueError("score_records_at requires records of equal length")
    if N < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    dz = params.dims.latent_dim
    n_rec = len(records)
    x = np.stack([r.x for r in records])
    m = np.stack([r.m for r in records])
    s = np.stack([r.s for r in records])
    eps = np.repeat(_path_noise(seed, T, N, dz), n_rec, axis=0)
    with ad.no_grad():
        z_list, _ = posterior_rollout(
            np.tile(x, (N, 1, 1)), np.tile(m, (N, 1, 1)), np.tile(s, (N, 1)), params, eps
        )
        y_hat = forward_from_path(z_list, params).data.reshape(N, n_rec)
    return [_risk_from_samples(y_hat[:, j].copy()) for j in range(n_rec)]


def score_at_time(record: PatientRecord, params: ModelParams, N: int, seed: int) -> RiskScore:
    """Risk score from the data available up to the record's last step."""
    if record.T < 1:
        raise ValueError("cannot score an empty record")
    return score_records_at([record], params, N, seed)[0]


def score_trajectory(
    record: PatientRecord,
    params: ModelParams,
    N: int,
    stride: int,
    seed: int,
) -> list[tuple[int, RiskScore]]:
    """Risk scores at T' = stride, 2*stride, ..., and the final step.

    Each point sees only the first T' steps, so appending later
    measurements never changes earlier points.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    points = list(range(stride, record.T + 1, stride))
    if not points or points[-1] != record.T:
        points.append(record.T)
    return [(t, score_at_time(record.truncated(t), params, N, seed)) for t in points]


def trajectory_csv(stay_id: str, points: list[tuple[int, RiskScore]]) -> str:
    """Plot-ready rows: stay_id, hours_from_admission, mean, ci_low, ci_high."""
    lines = ["stay_id,hours_from_admission,mean,ci_low,ci_high"]
    for t_prime, rs in points:
        lines.append(
            f"{stay_id},{2 * t_prime},{rs.mean!r},{rs.ci_low!r},{rs.ci_high!r}"
        )
    return "\n".join(lines) + "\n"
