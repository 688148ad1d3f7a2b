"""Dataset ingestion, preprocessing, synthetic cohort generation, and
checkpoint persistence.

File formats (all CSV, 2-hour time grid, empty field = missing value):
  timeseries.csv  stay_id,t_index,<feat_1>,...,<feat_M>
  static.csv      stay_id,age,aids,hematologic_malignancy,metastatic_cancer,admission_type
  labels.csv      stay_id,label            (1 = in-hospital mortality)

Checkpoints are self-describing JSON with explicit shapes and a format
version; serialization is deterministic so identical state produces
byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .model import Dims, ModelParams, init_params

CHECKPOINT_VERSION = 1

ADMISSION_TYPES = ("medical", "scheduled_surgery", "unscheduled_surgery")
STATIC_COLUMNS = ("age", "aids", "hematologic_malignancy", "metastatic_cancer", "admission_type")
# Encoded static layout: [age, aids, hematologic_malignancy, metastatic_cancer,
#                         onehot(admission_type) x 3]
STATIC_DIM = 4 + len(ADMISSION_TYPES)


class DataError(ValueError):
    """Schema or content violation in an input file."""


@dataclass
class PatientRecord:
    """One stay: static vector, (T, M) measurements, (T, M) observation mask.

    m[t, i] = 1 iff the value was actually observed; x may contain NaN at
    mask-0 cells before imputation and is finite everywhere afterwards.
    """

    stay_id: str
    s: np.ndarray
    x: np.ndarray
    m: np.ndarray
    y: int | None = None

    @property
    def T(self) -> int:
        return self.x.shape[0]

    def truncated(self, t_prime: int) -> "PatientRecord":
        """First t_prime steps only (scores must not see later data)."""
        if not 1 <= t_prime <= self.T:
            raise ValueError(f"truncation point {t_prime} outside [1, {self.T}]")
        return PatientRecord(self.stay_id, self.s, self.x[:t_prime], self.m[:t_prime], self.y)


@dataclass
class Normalizer:
    """Per-feature z-scoring fitted on observed training cells only."""

    feature_means: np.ndarray
    feature_stds: np.ndarray
    age_mean: float
    age_std: float

    STD_FLOOR = 1e-6

    @classmethod
    def fit(cls, records: Sequence[PatientRecord]) -> "Normalizer":
        if not records:
            raise DataError("cannot fit a normalizer on an empty record set")
        n_feat = records[0].x.shape[1]
        means = np.zeros(n_feat)
        stds = np.ones(n_feat)
        for i in range(n_feat):
            cells = np.concatenate([r.x[r.m[:, i] > 0, i] for r in records])
            if cells.size:
                means[i] = cells.mean()
                stds[i] = max(cells.std(), cls.STD_FLOOR)
        ages = np.array([r.s[0] for r in records])
        return cls(means, stds, float(ages.mean()), max(float(ages.std()), cls.STD_FLOOR))

    def transform(self, record: PatientRecord) -> PatientRecord:
        x = (record.x - self.feature_means) / self.feature_stds
        s = record.s.copy()
        s[0] = (s[0] - self.age_mean) / self.age_std
        return replace(record, x=x, s=s)

    def inverse_transform_x(self, x: np.ndarray) -> np.ndarray:
        return x * self.feature_stds + self.feature_means


@dataclass
class Dataset:
    records: list[PatientRecord]
    feature_names: list[str]
    static_schema: list[str] = field(default_factory=lambda: list(STATIC_COLUMNS))
    normalizer: Normalizer | None = None
    truth: dict | None = None  # synthetic generator parameters, when applicable

    def __post_init__(self):
        m = len(self.feature_names)
        for r in self.records:
            if r.x.shape[1] != m:
                raise DataError(f"stay {r.stay_id}: {r.x.shape[1]} features, expected {m}")

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.y for r in self.records])


def encode_static(age: float, aids: int, hema: int, meta: int, admission_type: str) -> np.ndarray:
    if admission_type not in ADMISSION_TYPES:
        raise DataError(
            f"unknown admission_type {admission_type!r}; expected one of {ADMISSION_TYPES}"
        )
    onehot = [1.0 if admission_type == a else 0.0 for a in ADMISSION_TYPES]
    return np.array([age, float(aids), float(hema), float(meta), *onehot])


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_cell(text: str, where: str) -> float:
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError as err:
        raise DataError(f"{where}: cannot parse value {text!r}") from err


def load_dataset(
    timeseries_path: str,
    static_path: str,
    labels_path: str | None = None,
) -> Dataset:
    """Read the CSV triplet into raw records (missing cells stay NaN).

    Every stay in the timeseries must have a static row; if a labels path is
    given, every stay must be labeled and every label must match a stay.
    """
    with open(timeseries_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:2] != ["stay_id", "t_index"]:
            raise DataError(f"{timeseries_path}: header must start with stay_id,t_index")
        feature_names = header[2:]
        if not feature_names:
            raise DataError(f"{timeseries_path}: no feature columns")
        rows: dict[str, list[tuple[int, list[float]]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{timeseries_path}:{lineno}: expected {len(header)} columns, got {len(row)}"
                )
            sid = row[0]
            t_index = int(row[1])
            vals = [_parse_cell(c, f"{timeseries_path}:{lineno}") for c in row[2:]]
            rows.setdefault(sid, []).append((t_index, vals))

    statics: dict[str, np.ndarray] = {}
    with open(static_path, newline="") as f:
        reader = csv.DictReader(f)
        expected = ["stay_id", *STATIC_COLUMNS]
        if reader.fieldnames != expected:
            raise DataError(f"{static_path}: header must be {','.join(expected)}")
        for row in reader:
            statics[row["stay_id"]] = encode_static(
                float(row["age"]),
                int(row["aids"]),
                int(row["hematologic_malignancy"]),
                int(row["metastatic_cancer"]),
                row["admission_type"],
            )

    labels: dict[str, int] | None = None
    if labels_path is not None:
        labels = {}
        with open(labels_path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != ["stay_id", "label"]:
                raise DataError(f"{labels_path}: header must be stay_id,label")
            for row in reader:
                val = int(row["label"])
                if val not in (0, 1):
                    raise DataError(f"{labels_path}: label for stay {row['stay_id']} must be 0/1")
                labels[row["stay_id"]] = val
        for sid in labels:
            if sid not in rows:
                raise DataError(f"{labels_path}: unknown stay_id {sid!r} (not in timeseries)")

    records = []
    for sid, entries in rows.items():
        t_indices = [t for t, _ in entries]
        if any(b <= a for a, b in zip(t_indices, t_indices[1:])):
            raise DataError(f"stay {sid}: t_index not strictly increasing")
        if t_indices != list(range(len(t_indices))):
            raise DataError(f"stay {sid}: t_index must run 0..T-1 without gaps")
        if sid not in statics:
            raise DataError(f"{static_path}: missing static row for stay {sid!r}")
        y = None
        if labels is not None:
            if sid not in labels:
                raise DataError(f"{labels_path}: missing label for stay {sid!r}")
            y = labels[sid]
        x = np.array([vals for _, vals in entries], dtype=np.float64)
        m = np.isfinite(x).astype(np.float64)
        records.append(PatientRecord(stay_id=sid, s=statics[sid], x=x, m=m, y=y))

    return Dataset(records=records, feature_names=feature_names)


# ---------------------------------------------------------------------------
# Imputation and preprocessing
# ---------------------------------------------------------------------------


def impute_and_mask(series: np.ndarray, fallback: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward-backward linear imputation of one feature series.

    Interior gaps interpolate linearly between the nearest observed
    neighbors; leading/trailing gaps hold the first/last observed value. A
    fully missing series takes `fallback` (the training-set feature mean).
    Returns (imputed values, 0/1 observation mask).
    """
    series = np.asarray(series, dtype=np.float64)
    mask = np.isfinite(series).astype(np.float64)
    obs = np.flatnonzero(mask)
    if obs.size == 0:
        if fallback is None:
            raise DataError("fully missing series and no fallback value given")
        return np.full(series.shape, float(fallback)), mask
    imputed = np.interp(np.arange(series.size), obs, series[obs])
    return imputed, mask


def impute_record(record: PatientRecord, feature_means: np.ndarray) -> PatientRecord:
    x = np.empty_like(record.x)
    m = np.empty_like(record.m)
    for i in range(record.x.shape[1]):
        x[:, i], m[:, i] = impute_and_mask(record.x[:, i], fallback=feature_means[i])
    return replace(record, x=x, m=m)


def preprocess(records: Iterable[PatientRecord], normalizer: Normalizer) -> list[PatientRecord]:
    """Impute (raw space, training means as fallback) then standardize."""
    return [normalizer.transform(impute_record(r, normalizer.feature_means)) for r in records]


# ---------------------------------------------------------------------------
# Synthetic cohort
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Linear-Gaussian cohort generator standing in for the real ICU data.

    With `mode_decays` set, the dynamics are diagonal with one decay rate
    per latent mode (random dense emission mixes them into observations);
    slow modes give the trajectories genuine long-range structure, the way
    a chronic severity state would. Process noise is normalized so every
    mode has stationary standard deviation `process_noise`, and the static
    drive is scaled by (1 - decay) so steady-state offsets stay bounded.
    """

    n_records: int = 1000
    latent_dim: int = 4
    feature_dim: int = 6
    spectral_radius: float = 0.7
    mode_decays: Sequence[float] | None = None
    process_noise: float = 0.3
    obs_noise: float = 0.5
    static_drive: float = 0.15
    missing_rate: float | Sequence[float] = 0.3
    t_min: int = 16
    t_max: int = 28
    prevalence: float = 0.104
    readout_scale: float = 2.0
    readout_mode_weights: Sequence[float] | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.spectral_radius < 1:
            raise DataError("spectral radius must be in (0, 1) for stable dynamics")
        if self.mode_decays is not None:
            decays = np.asarray(self.mode_decays, dtype=np.float64)
            if decays.shape != (self.latent_dim,):
                raise DataError("need one mode decay per latent dimension")
            if np.any(np.abs(decays) >= 1):
                raise DataError("mode decays must lie inside the unit circle")
        rates = np.atleast_1d(np.asarray(self.missing_rate, dtype=np.float64))
        if np.any(rates < 0) or np.any(rates >= 1):
            raise DataError("missingness rate must be in [0, 1)")
        if not 0 < self.prevalence < 1:
            raise DataError("prevalence target must be in (0, 1)")
        if self.t_min < 1 or self.t_max < self.t_min:
            raise DataError("invalid T range")


def _calibrate_intercept(logits: np.ndarray, target: float, tol: float = 0.02) -> float:
    """Bisect b0 so mean sigmoid(logits + b0) hits the target prevalence."""
    def prev(b0: float) -> float:
        return float(np.mean(1.0 / (1.0 + np.exp(-(logits + b0)))))

    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if prev(mid) < target:
            lo = mid
        else:
            hi = mid
    b0 = 0.5 * (lo + hi)
    if abs(prev(b0) - target) > tol:
        raise DataError(
            f"prevalence target {target} unreachable (achieved {prev(b0):.4f} at b0={b0:.2f})"
        )
    return b0


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate a cohort from a stable LGSSM with Bernoulli missingness.

    z_t = A z_{t-1} + B s + w_t, x_t = C z_t + v_t; the label is Bernoulli
    of a logistic readout of the final latent, with the intercept bisected
    so the expected prevalence matches the target. Deterministic per seed.
    """
    rng = np.random.default_rng(cfg.seed)
    d, m = cfg.latent_dim, cfg.feature_dim

    if cfg.mode_decays is not None:
        decays = np.asarray(cfg.mode_decays, dtype=np.float64)
        A = np.diag(decays)
        # stationary std = process_noise in every mode
        q_std = cfg.process_noise * np.sqrt(1.0 - decays**2)
        B = cfg.static_drive * (1.0 - decays)[:, None] * rng.standard_normal((d, STATIC_DIM))
    else:
        raw_a = rng.standard_normal((d, d))
        eigvals = np.linalg.eigvals(raw_a)
        A = raw_a * (cfg.spectral_radius / max(np.abs(eigvals)))
        q_std = np.full(d, cfg.process_noise)
        B = cfg.static_drive * rng.standard_normal((d, STATIC_DIM))
    C = rng.standard_normal((m, d)) / np.sqrt(d)
    if cfg.readout_mode_weights is not None:
        u = np.asarray(cfg.readout_mode_weights, dtype=np.float64)
        if u.shape != (d,):
            raise DataError("need one readout weight per latent dimension")
    else:
        u = rng.standard_normal(d)
    u = cfg.readout_scale * u / np.linalg.norm(u)
    rates = np.broadcast_to(np.atleast_1d(np.asarray(cfg.missing_rate, dtype=np.float64)), (m,))

    age_lo, age_hi = 15.0, 90.0
    age_center = 0.5 * (age_lo + age_hi)
    age_scale = (age_hi - age_lo) / np.sqrt(12.0)

    records: list[PatientRecord] = []
    final_latents = np.empty((cfg.n_records, d))
    for idx in range(cfg.n_records):
        age = round(float(rng.uniform(age_lo, age_hi)), 1)
        aids = int(rng.random() < 0.06)
        hema = int(rng.random() < 0.08)
        meta = int(rng.random() < 0.10)
        adm = ADMISSION_TYPES[rng.choice(len(ADMISSION_TYPES), p=[0.6, 0.25, 0.15])]
        s = encode_static(age, aids, hema, meta, adm)
        s_scaled = s.copy()
        s_scaled[0] = (age - age_center) / age_scale

        T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        drive = B @ s_scaled
        z = np.zeros(d)
        zs = np.empty((T, d))
        for t in range(T):
            z = A @ z + drive + q_std * rng.standard_normal(d)
            zs[t] = z
        x = zs @ C.T + cfg.obs_noise * rng.standard_normal((T, m))
        observed = rng.random((T, m)) >= rates
        x_raw = np.where(observed, x, np.nan)
        final_latents[idx] = z
        records.append(
            PatientRecord(
                stay_id=f"stay{idx:06d}",
                s=s,
                x=x_raw,
                m=observed.astype(np.float64),
                y=None,
            )
        )

    logits = final_latents @ u
    b0 = _calibrate_intercept(logits, cfg.prevalence)
    probs = 1.0 / (1.0 + np.exp(-(logits + b0)))
    draws = rng.random(cfg.n_records)
    for record, p, roll in zip(records, probs, draws):
        record.y = int(roll < p)

    truth = {
        "A": A.tolist(),
        "B": B.tolist(),
        "C": C.tolist(),
        "Q": (q_std**2).tolist(),
        "R": np.full(m, cfg.obs_noise**2).tolist(),
        "readout_u": u.tolist(),
        "readout_b0": b0,
        "age_center": age_center,
        "age_scale": age_scale,
    }
    return Dataset(
        records=records,
        feature_names=[f"feat_{i + 1}" for i in range(m)],
        truth=truth,
    )


def truth_lgssm(truth: dict) -> "LGSSM":
    """Generator parameters as an LGSSM for the Bayes-reference oracle."""
    from .oracle import LGSSM

    A = np.asarray(truth["A"])
    m = len(truth["C"])
    d = A.shape[0]
    return LGSSM(
        A=A,
        B=np.asarray(truth["B"]),
        b=np.zeros(d),
        C=np.asarray(truth["C"]),
        d=np.zeros(m),
        Q=np.asarray(truth["Q"]),
        R=np.asarray(truth["R"]),
        z0_mean=np.zeros(d),
    )


def scale_static_for_truth(record: PatientRecord, truth: dict) -> np.ndarray:
    """Re-scale a raw static vector the way the generator drove the dynamics."""
    s = record.s.copy()
    s[0] = (s[0] - truth["age_center"]) / truth["age_scale"]
    return s


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value: float) -> str:
    return repr(float(value))


def write_dataset_csvs(ds: Dataset, out_dir: str) -> None:
    """Write the timeseries/static/labels triplet (lossless float round-trip)."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["stay_id,t_index," + ",".join(ds.feature_names)]
    for r in ds.records:
        for t in range(r.T):
            cells = [
                _fmt(r.x[t, i]) if r.m[t, i] > 0 else ""
                for i in range(len(ds.feature_names))
            ]
            lines.append(f"{r.stay_id},{t}," + ",".join(cells))
    _atomic_write(os.path.join(out_dir, "timeseries.csv"), "\n".join(lines) + "\n")

    lines = ["stay_id," + ",".join(STATIC_COLUMNS)]
    for r in ds.records:
        onehot = r.s[4:]
        adm = ADMISSION_TYPES[int(np.argmax(onehot))]
        lines.append(
            f"{r.stay_id},{_fmt(r.s[0])},{int(r.s[1])},{int(r.s[2])},{int(r.s[3])},{adm}"
        )
    _atomic_write(os.path.join(out_dir, "static.csv"), "\n".join(lines) + "\n")

    if all(r.y is not None for r in ds.records):
        lines = ["stay_id,label"] + [f"{r.stay_id},{r.y}" for r in ds.records]
        _atomic_write(os.path.join(out_dir, "labels.csv"), "\n".join(lines) + "\n")

    if ds.truth is not None:
        _atomic_write(os.path.join(out_dir, "truth.json"), _canonical_json(ds.truth))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1) + "\n"


def _array_entry(t) -> dict:
    arr = t.data if hasattr(t, "data") else np.asarray(t)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _array_from_entry(entry: dict, name: str) -> np.ndarray:
    shape = tuple(entry["shape"])
    data = np.asarray(entry["data"], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise DataError(
            f"checkpoint field {name!r}: {data.size} values do not fill shape {shape}"
        )
    return data.reshape(shape)


def save_checkpoint(
    params: ModelParams,
    path: str,
    normalizer: Normalizer | None = None,
    meta: dict | None = None,
) -> None:
    """Persist every parameter with explicit shapes, plus dims and stats."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "dims": {f.name: getattr(params.dims, f.name) for f in fields(params.dims)},
        "var_floor": params.var_floor,
        "linear_mode": params.linear_mode,
        "params": {name: _array_entry(t) for name, t in params.named_parameters()},
        "normalizer": None
        if normalizer is None
        else {
            "feature_means": normalizer.feature_means.tolist(),
            "feature_stds": normalizer.feature_stds.tolist(),
            "age_mean": normalizer.age_mean,
            "age_std": normalizer.age_std,
        },
    }
    _atomic_write(path, _canonical_json(payload))


def load_checkpoint(path: str) -> tuple[ModelParams, Normalizer | None, dict]:
    """Inverse of save_checkpoint; validates version and every array shape."""
    with open(path) as f:
        payload = json.load(f)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version {version!r} unsupported (expected {CHECKPOINT_VERSION})")
    dims = Dims(**payload["dims"])
    params = init_params(dims, seed=0, var_floor=payload["var_floor"],
                         linear_mode=payload["linear_mode"])
    stored = payload["params"]
    for name, t in params.named_parameters():
        if name not in stored:
            raise DataError(f"checkpoint missing parameter {name!r}")
        arr = _array_from_entry(stored[name], name)
        if arr.shape != t.data.shape:
            raise DataError(
                f"checkpoint field {name!r}: shape {arr.shape} does not match model {t.data.shape}"
            )
        t.data = arr
    normalizer = None
    if payload.get("normalizer") is not None:
        n = payload["normalizer"]
        normalizer = Normalizer(
            feature_means=np.asarray(n["feature_means"], dtype=np.float64),
            feature_stds=np.asarray(n["feature_stds"], dtype=np.float64),
            age_mean=float(n["age_mean"]),
            age_std=float(n["age_std"]),
        )
    return params, normalizer, payload.get("meta", {})
