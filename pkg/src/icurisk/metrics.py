"""Ranking metrics (AUROC, AUPRC), DeLong's paired test, and the two
horizon-sweep evaluation protocols.

AUROC uses the Mann-Whitney convention (ties count 1/2); AUPRC is average
precision with tied scores grouped at one threshold. Both match brute-force
pair/threshold enumeration exactly, which the tests rely on.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import PatientRecord
from .model import ModelParams
from .scoring import score_records_at


def _validated(scores, labels, need_both: bool = True) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    if need_both and (labels.min() == labels.max()):
        raise ValueError("need both classes present")
    return scores, labels


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their group average."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties at 1/2."""
    scores, labels = _validated(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    ranks = _midranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with step-wise integration, tied scores grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    l_sorted = labels[order]
    ap = 0.0
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        gained = int((l_sorted[i : j + 1] == 1).sum())
        tp += gained
        fp += (j - i + 1) - gained
        if gained:
            ap += (gained / n_pos) * (tp / (tp + fp))
        i = j + 1
    return float(ap)


def _delong_components(scores: np.ndarray, pos: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """AUROC plus its positive/negative structural components (midrank form)."""
    x = scores[pos]
    y = scores[~pos]
    m, n = x.size, y.size
    tx = _midranks(x)
    ty = _midranks(y)
    tz = _midranks(np.concatenate([x, y]))
    auc = (tz[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return float(auc), v10, v01


def delong_test(scores_a, scores_b, labels) -> tuple[float, float, float]:
    """Two-sided DeLong test for paired AUROCs: (auroc_a, auroc_b, p).

    Identical score vectors give p = 1.0; a zero-variance difference with
    unequal AUROCs degenerates to p = 0.
    """
    scores_a, labels = _validated(scores_a, labels)
    scores_b, _ = _validated(scores_b, labels)
    pos = labels == 1
    auc_a, v10_a, v01_a = _delong_components(scores_a, pos)
    auc_b, v10_b, v01_b = _delong_components(scores_b, pos)
    m, n = v10_a.size, v01_a.size
    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1) if n > 1 else np.zeros((2, 2))
    var = s10 / m + s01 / n
    var_diff = var[0, 0] + var[1, 1] - 2.0 * var[0, 1]
    diff = auc_a - auc_b
    if var_diff <= 0.0:
        return auc_a, auc_b, 1.0 if diff == 0.0 else 0.0
    z = diff / math.sqrt(var_diff)
    return auc_a, auc_b, float(math.erfc(abs(z) / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# Evaluation protocols
# ---------------------------------------------------------------------------


@dataclass
class EvalCurve:
    """Per-point metrics along a time axis plus the patient-weighted average."""

    axis_hours: list[int]
    aurocs: list[float]
    auprcs: list[float]
    n_records: list[int]
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def aggregate_auroc(self) -> float:
        return self._weighted(self.aurocs)

    @property
    def aggregate_auprc(self) -> float:
        return self._weighted(self.auprcs)

    def _weighted(self, values: list[float]) -> float:
        weights = np.asarray(self.n_records, dtype=np.float64)
        return float(np.asarray(values) @ weights / weights.sum())

    def to_csv(self) -> str:
        lines = ["axis_hours,auroc,auprc,n"]
        for h, a, p, n in zip(self.axis_hours, self.aurocs, self.auprcs, self.n_records):
            lines.append(f"{h},{a!r},{p!r},{n}")
        lines.append(f"# aggregate_auroc,{self.aggregate_auroc!r}")
        lines.append(f"# aggregate_auprc,{self.aggregate_auprc!r}")
        for h, reason in self.skipped:
            lines.append(f"# skipped,{h},{reason}")
        return "\n".join(lines) + "\n"


def _scores_by_length(
    groups: dict[int, list[tuple[int, PatientRecord]]],
    params: ModelParams,
    N: int,
    seed: int,
) -> dict[int, float]:
    """Score variable-length truncations, one batched rollout per length."""
    out: dict[int, float] = {}
    for t_prime in sorted(groups):
        idx, recs = zip(*groups[t_prime])
        for i, rs in zip(idx, score_records_at(list(recs), params, N, seed)):
            out[i] = rs.mean
    return out


def eval_task1(
    params: ModelParams,
    records: list[PatientRecord],
    horizons_hours: list[int],
    N: int,
    seed: int,
) -> EvalCurve:
    """Fixed-horizon sweep: truncate every (long enough) record to each
    horizon after admission and rank the mean risk scores."""
    curve = EvalCurve([], [], [], [])
    for hours in horizons_hours:
        t_prime = hours // 2
        if t_prime < 1:
            raise ValueError(f"horizon {hours}h is below the 2-hour grid")
        eligible = [(i, r) for i, r in enumerate(records) if r.T >= t_prime]
        if not eligible:
            raise ValueError(f"no record is at least {hours}h long")
        groups: dict[int, list[tuple[int, PatientRecord]]] = defaultdict(list)
        for i, r in eligible:
            groups[t_prime].append((i, r.truncated(t_prime)))
        scores = _scores_by_length(groups, params, N, seed)
        ordered = [i for i, _ in eligible]
        s = [scores[i] for i in ordered]
        y = [records[i].y for i in ordered]
        curve.axis_hours.append(hours)
        curve.aurocs.append(auroc(s, y))
        curve.auprcs.append(auprc(s, y))
        curve.n_records.append(len(eligible))
    return curve


def eval_task2(
    params: ModelParams,
    records: list[PatientRecord],
    lead_hours: list[int],
    N: int,
    seed: int,
) -> EvalCurve:
    """Lead-time sweep: at lead L <= 0 hours, truncate each record |L| hours
    before its end; a lead with no eligible cohort (or one class only) is
    omitted and recorded. The aggregate weights each point by its cohort size."""
    curve = EvalCurve([], [], [], [])
    for hours in lead_hours:
        if hours > 0:
            raise ValueError("lead times are non-positive (hours before discharge/death)")
        back = (-hours) // 2
        eligible = [(i, r, r.T - back) for i, r in enumerate(records) if r.T - back >= 1]
        if not eligible:
            curve.skipped.append((hours, "no eligible records"))
            continue
        labels = [records[i].y for i, _, _ in eligible]
        if min(labels) == max(labels):
            curve.skipped.append((hours, "single-class cohort"))
            continue
        groups: dict[int, list[tuple[int, PatientRecord]]] = defaultdict(list)
        for i, r, t_prime in eligible:
            groups[t_prime].append((i, r.truncated(t_prime)))
        scores = _scores_by_length(groups, params, N, seed)
        ordered = [i for i, _, _ in eligible]
        s = [scores[i] for i in ordered]
        curve.axis_hours.append(hours)
        curve.aurocs.append(auroc(s, labels))
        curve.auprcs.append(auprc(s, labels))
        curve.n_records.append(len(eligible))
    return curve
